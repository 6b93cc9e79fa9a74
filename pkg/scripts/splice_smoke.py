"""Train a chunk-level boundary detector on clicked synthetic splices.

Each inserted word is marked by a short click, which gives the detector a
learnable cue; real splices carry no such marker.

    python scripts/splice_smoke.py --train-chunks 200 --dev-chunks 100 --epochs 20
"""
import argparse
import time

from spoofsplice.model import build, preset
from spoofsplice.toy import click_chunks
from spoofsplice.training import evaluate, train


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="tiny-plain")
    parser.add_argument("--train-chunks", type=int, default=200)
    parser.add_argument("--dev-chunks", type=int, default=100)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    t0 = time.perf_counter()
    train_set = click_chunks(args.train_chunks, seed=args.seed)
    dev_set = click_chunks(args.dev_chunks, seed=args.seed + 1)
    model = build(preset(args.preset, input_shape=(16, 432, 1), num_classes=2), seed=args.seed)

    def show(record, m):
        print(f"epoch={record.epoch} train_loss={record.train_loss:.4f} dev_loss={record.dev_loss:.4f} "
              f"dev_sca={record.dev_sca:.3f} elapsed_s={time.perf_counter() - t0:.1f}")
        return False

    res = train(model, train_set, dev_set, args.epochs, args.batch_size, args.seed, args.lr, stop=show)
    model.load_state(res.best)
    _, dev_sca, _ = evaluate(model, dev_set)
    print(f"best_epoch={res.best_epoch} best_dev_loss={res.best_dev_loss:.4f} best_dev_sca={dev_sca:.3f}")


if __name__ == "__main__":
    main()
