#!/usr/bin/env python3
"""Train the full model once, then score its predictions across entropy thresholds.

The predictions are fixed; only the unknown relabelling changes, so the
trade-off between AOSE and known-class mAP can be read off directly.
Proposals whose argmax is background are already gone at this point, so
AP_u here is lower than in the ablation table, where relabelling happens
inside prediction before background detections are dropped.
"""
from __future__ import annotations

import argparse

from osod_align.harness import DatasetSpec, TrainConfig, generate_dataset, train_on
from osod_align.harness.ablation import ground_truth, predict_split
from osod_align.metrics import evaluate


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--thresholds", type=float, nargs="+", default=[1.6, 1.2, 1.0, 0.85, 0.7, 0.5, 0.35, 0.2])
    args = parser.parse_args()

    data = generate_dataset(DatasetSpec(seed=args.seed))
    model = train_on(data.train, data.table, TrainConfig(seed=args.seed))
    dets = predict_split(model, data.test, entropy_thresh=None)
    gts = ground_truth(data.test)

    print(f"{'thresh':>6} {'AOSE':>5} {'mAP_k':>6} {'AP_u':>6} {'HMP':>6} {'WI':>6}")
    base = evaluate(dets, gts)
    print(f"{'none':>6} {base.aose:5d} {base.map_k:6.2f} {base.ap_u:6.2f} {base.hmp:6.2f} {base.wi:6.2f}")
    for t in sorted(args.thresholds, reverse=True):
        r = evaluate(dets, gts, entropy_thresh=t)
        print(f"{t:6.2f} {r.aose:5d} {r.map_k:6.2f} {r.ap_u:6.2f} {r.hmp:6.2f} {r.wi:6.2f}")


if __name__ == "__main__":
    main()
