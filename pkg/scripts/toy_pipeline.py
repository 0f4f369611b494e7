"""Blobs suite, 5 seeds: Lo-Hp against Lo-Op (and optionally the one-shot hypernet).

    python scripts/toy_pipeline.py --out runs/toy [--hypernet]
"""
import argparse
import os
from dataclasses import replace

from lohp.pipeline import ExperimentConfig, run_pipeline

ROWS = ("gen_accuracy", "ref_accuracy", "accuracy_ratio", "gen_loss", "cos_sim_mean")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--hypernet", action="store_true")
    args = ap.parse_args()
    modes = ["lo_hp", "lo_op"] + (["hypernet_baseline"] if args.hypernet else [])
    base = replace(ExperimentConfig(), seeds=tuple(args.seeds))
    results = {}
    for mode in modes:
        cfg = replace(base, train=replace(base.train, mode=mode), eval=replace(base.eval, verify=False))
        results[mode] = run_pipeline(cfg, out_dir=os.path.join(args.out, mode))["metrics"]
    print(f"{'metric':16s}" + "".join(f"{m:>22s}" for m in modes))
    for row in ROWS:
        cells = []
        for m in modes:
            v = results[m].get(row)
            cells.append(f"{v['mean']:.3f} ± {v['std']:.3f}" if v else "-")
        print(f"{row:16s}" + "".join(f"{c:>22s}" for c in cells))


if __name__ == "__main__":
    main()
