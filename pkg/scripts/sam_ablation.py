"""Lo-Hp trained on SAM-prepared against plain trajectories: final downstream loss per seed.

    python scripts/sam_ablation.py
"""
import argparse
from dataclasses import replace

from lohp.pipeline import ExperimentConfig, run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--rho", type=float, default=0.05)
    args = ap.parse_args()
    base = replace(ExperimentConfig(), seeds=tuple(args.seeds))
    base = replace(base, eval=replace(base.eval, verify=False))
    out = {}
    for sam in (False, True):
        cfg = replace(base, prep=replace(base.prep, sam=sam, sam_rho=args.rho))
        out[sam] = run_pipeline(cfg, write=False)["metrics"]
    print("seed  loss(SAM off)  loss(SAM on)  curve-final(off)  curve-final(on)")
    for i, seed in enumerate(args.seeds):
        print(f"{seed:4d}  {out[False]['gen_loss']['values'][i]:13.4f}  {out[True]['gen_loss']['values'][i]:12.4f}"
              f"  {out[False]['train_loss_final']['values'][i]:16.4f}  {out[True]['train_loss_final']['values'][i]:15.4f}")


if __name__ == "__main__":
    main()
