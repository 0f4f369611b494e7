"""Step count, median latency and accuracy for k = 1, 2, 3 on the blobs suite.

    python scripts/k_sweep.py --out runs/ksweep
"""
import argparse
import csv
import os
from dataclasses import replace

from lohp.pipeline import ExperimentConfig, run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ksweep")
    ap.add_argument("--ks", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    base = ExperimentConfig()
    rows = []
    for k in args.ks:
        cfg = replace(base, seeds=tuple(args.seeds), train=replace(base.train, k=k),
                      eval=replace(base.eval, verify=False))
        rep = run_pipeline(cfg, out_dir=os.path.join(args.out, f"k{k}"))
        N = [r["N"] for s in rep["ksweep"].values() for r in s if r["k"] == k]
        rows.append({"k": k, "N_mean": sum(N) / len(N), "latency_ms": rep["timings"]["latency_ms"]["mean"],
                     "accuracy": rep["metrics"]["gen_accuracy"]["mean"],
                     "accuracy_std": rep["metrics"]["gen_accuracy"]["std"]})
        print(rows[-1])
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
