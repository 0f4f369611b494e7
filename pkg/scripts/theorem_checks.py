"""Verdict table for the flow identity, segment composition and error decomposition.

    python scripts/theorem_checks.py --envs 10 --quadratics 100
"""
import argparse

import numpy as np

from lohp.cli import print_verdicts
from lohp.nn import make_rng
from lohp.optimizers import OptimizerConfig, prepare_trajectory
from lohp.tasks import random_quadratic
from lohp.theory import (random_microenv, random_partition, train_microenv, verify_theorem1,
                         verify_theorem2_composition, verify_theorem3_decomposition)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--envs", type=int, default=10)
    ap.add_argument("--partitions", type=int, default=1000)
    ap.add_argument("--quadratics", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = make_rng(args.seed)
    rows = []
    for j in range(args.envs):
        raw = random_microenv(rng, 4, 3)
        env = train_microenv(raw, 5000, 0.3)
        v = verify_theorem1(env, 0, 3, 0, check_precondition=False)
        rows.append({"claim": "flow_identity", "instance": f"env{j}", "lhs": v.lhs.sum(), "rhs": v.rhs.sum(),
                     "rel_error": v.rel_error, "passed": v.passed and env.max_residual <= 1e-6})
        neg = verify_theorem1(raw, 0, 3, 0, check_precondition=False)
        rows.append({"claim": "negative_control", "instance": f"env{j}", "lhs": neg.lhs.sum(), "rhs": neg.rhs.sum(),
                     "rel_error": neg.rel_error, "passed": not neg.passed})
        bad = sum(not verify_theorem2_composition(env, random_partition(rng, 3),
                                                  [int(rng.integers(s)) for s in env.sizes]).holds
                  for _ in range(args.partitions))
        rows.append({"claim": "composition", "instance": f"env{j}", "lhs": float(bad), "rhs": 0.0,
                     "rel_error": 0.0, "passed": bad == 0})
    held = 0
    for _ in range(args.quadratics):
        task = random_quadratic(rng, 4, 10.0)
        tr = prepare_trajectory(task, None, OptimizerConfig("sgd", 1.0 / task.l, max_epochs=32,
                                                            early_stop_patience=100), rng)
        # a reconstruction with a random error of size comparable to the last step
        theta_hat = tr.states[-1] + 0.1 * rng.standard_normal(task.dim)
        held += verify_theorem3_decomposition(task, theta_hat, tr.states[-1], tr.T, tr.states[0]).holds
    rows.append({"claim": "error_decomposition", "instance": f"{args.quadratics} quads", "lhs": float(held),
                 "rhs": float(args.quadratics), "rel_error": 0.0, "passed": held == args.quadratics})
    print_verdicts(rows)
    raise SystemExit(0 if all(r["passed"] for r in rows) else 3)


if __name__ == "__main__":
    main()
