#!/usr/bin/env python3
"""Run the eight-case ablation over several seeds and print per-case means.

    python3 scripts/run_ablation.py --seeds 0 1 2
"""
from __future__ import annotations

import argparse
import logging
import time

import numpy as np

from osod_align.harness import DatasetSpec, TrainConfig, ablate

FIELDS = ("wi", "aose", "map_k", "ap_u", "hmp")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--entropy-threshold", type=float, default=0.85)
    parser.add_argument("--iterations", type=int, help="override TrainConfig.iterations")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    table: dict[str, list[dict]] = {}
    flags: dict[str, tuple[int, int, int]] = {}
    for seed in args.seeds:
        t0 = time.perf_counter()
        cfg = TrainConfig(seed=seed)
        if args.iterations is not None:
            cfg = TrainConfig(seed=seed, iterations=args.iterations)
        for row in ablate(DatasetSpec(seed=seed), cfg, args.entropy_threshold):
            flags[row.name] = (int(row.enable_sc), int(row.enable_cd), int(row.enable_of))
            values = {f: float(getattr(row.report, f)) for f in FIELDS}
            values["loss_drop"] = row.first_loss - row.last_loss
            table.setdefault(row.name, []).append(values)
        print(f"seed {seed}: {time.perf_counter() - t0:.1f}s")

    print(f"\nmeans over seeds {args.seeds}")
    print(f"{'case':<10} SC CD OF {'WI':>6} {'AOSE':>6} {'mAP_k':>6} {'AP_u':>6} {'HMP':>6} {'dLoss':>6}")
    for name, runs in table.items():
        m = {k: np.mean([r[k] for r in runs]) for k in runs[0]}
        sc, cd, of = flags[name]
        print(f"{name:<10} {sc:>2} {cd:>2} {of:>2} {m['wi']:6.2f} {m['aose']:6.1f} {m['map_k']:6.2f} "
              f"{m['ap_u']:6.2f} {m['hmp']:6.2f} {m['loss_drop']:6.2f}")


if __name__ == "__main__":
    main()
