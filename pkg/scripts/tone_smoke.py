"""Overfit the three-class tone task and print per-epoch train SCA.

    python scripts/tone_smoke.py --epochs 50 --frames 64
"""
import argparse
import time

import numpy as np

from spoofsplice.features import cqt, fit_frames
from spoofsplice.metrics import sca
from spoofsplice.model import build, preset
from spoofsplice.toy import tone_dataset
from spoofsplice.training import LabeledExample, stack, train


def examples(n_per_class, seed, frames):
    return [LabeledExample(fit_frames(cqt(clip), frames).values.astype(np.float32), label)
            for clip, label in tone_dataset(n_per_class, seed)]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="tiny-plain")
    parser.add_argument("--frames", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    t0 = time.perf_counter()
    train_set = examples(10, args.seed, args.frames)
    dev_set = examples(5, args.seed + 1, args.frames)
    model = build(preset(args.preset, input_shape=(args.frames, 432, 1), num_classes=3), seed=args.seed)
    x, y = stack(train_set)

    def show(record, m):
        acc = sca(np.argmax(m.predict(x), axis=1), y)
        print(f"epoch={record.epoch} train_loss={record.train_loss:.4f} dev_loss={record.dev_loss:.4f} "
              f"train_sca={acc:.3f} elapsed_s={time.perf_counter() - t0:.1f}")
        return False

    res = train(model, train_set, dev_set, args.epochs, args.batch_size, args.seed, args.lr, stop=show)
    print(f"best_epoch={res.best_epoch} best_dev_loss={res.best_dev_loss:.4f}")


if __name__ == "__main__":
    main()
