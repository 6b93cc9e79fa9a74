"""Print layer manifest, parameter count and forward time for each preset.

    python scripts/model_report.py --forward
"""
import argparse
import time

import numpy as np

from spoofsplice.model import PRESETS, build


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--forward", action="store_true", help="also time one infer-mode forward, batch 2")
    args = parser.parse_args(argv)
    for name, cfg in PRESETS.items():
        model = build(cfg)
        line = f"{name:18s} params={model.count_params():>9,d} input={list(cfg.input_shape)} " \
               f"layers={','.join(model.manifest)}"
        if args.forward:
            x = np.random.default_rng(0).normal(size=(2, *cfg.input_shape)).astype(np.float32)
            t0 = time.perf_counter()
            model.predict(x, batch_size=2)
            line += f" forward_s={time.perf_counter() - t0:.2f}"
        print(line)


if __name__ == "__main__":
    main()
