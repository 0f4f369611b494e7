"""Command-line entry point: ``lohp <subcommand> [--config F] [--store F] [--out D] [--seed S] [--mode M]``.

Exit codes: 0 ok, 1 usage, 2 phase failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .eval import inference_steps, infer_weights, median_latency, project_trajectories_2d
from .pipeline import (ConfigError, ExperimentConfig, build_suite, load_config, net_spec, policy_model,
                       prepare_offline, reference_run, render_config, run_pipeline, seed_streams, _score,
                       _verify)
from .policy import load_policy, save_policy
from .store import StoreFormatError, read_store, write_store
from .tasks import task_conditioning
from .training import train_policy

EXIT_OK, EXIT_USAGE, EXIT_PHASE, EXIT_VERIFY = 0, 1, 2, 3
MODES = {"lo_hp": "lo_hp", "lo_op": "lo_op", "hypernet": "hypernet_baseline"}

log = logging.getLogger("lohp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="lohp", description="Offline-trajectory weight generation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in [("prepare", "run optimizers and write the sub-trajectory store"),
                        ("train", "train the policy on a store"),
                        ("infer", "generate weights for the test tasks"),
                        ("eval", "score generated weights against the optimizer reference"),
                        ("diagnose", "export 2D trajectory projections"),
                        ("verify", "run the theorem checks and print a verdict table"),
                        ("pipeline", "all phases over every configured seed")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config file (section.key = JSON value)")
        sp.add_argument("--store", help="sub-trajectory store path (default: <out>/store.lohp)")
        sp.add_argument("--out", help="output directory (default: config out_dir)")
        sp.add_argument("--seed", type=int, help="override the seed list with one seed")
        sp.add_argument("--mode", choices=sorted(MODES), help="training mode")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.mode is not None:
        cfg = replace(cfg, train=replace(cfg.train, mode=MODES[args.mode]))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _store_path(args, cfg):
    return args.store or os.path.join(cfg.out_dir, "store.lohp")


def cmd_prepare(args, cfg):
    seed = cfg.seeds[0]
    rngs = seed_streams(seed)
    train_tasks, _, theta0 = build_suite(cfg, rngs["suite"])
    _, samples = prepare_offline(cfg, train_tasks, theta0, rngs["prep"], cfg.train.k)
    n = write_store(_store_path(args, cfg), samples)
    print(f"wrote {n} records to {_store_path(args, cfg)}")
    return EXIT_OK


def cmd_train(args, cfg):
    if cfg.train.mode == "hypernet_baseline":
        raise ConfigError("the train subcommand handles lo_hp and lo_op; use pipeline for the hypernet")
    samples = read_store(_store_path(args, cfg))
    model = policy_model(cfg)
    phi, rep = train_policy(samples, model, cfg.train, seed_streams(cfg.seeds[0])["train"])
    save_policy(os.path.join(cfg.out_dir, "policy.lohp"), model, phi)
    with open(os.path.join(cfg.out_dir, "train_report.json"), "w") as fh:
        json.dump(rep, fh)
    print(f"trained {cfg.train.epochs} steps; final loss {np.mean(rep['loss_curve'][-50:]):.4f}")
    return EXIT_OK


def _test_setup(cfg):
    seed = cfg.seeds[0]
    rngs = seed_streams(seed)
    _, test_tasks, theta0 = build_suite(cfg, rngs["suite"])
    refs = [reference_run(cfg, task, theta0, rngs["eval"], cfg.train.k) for task in test_tasks]
    return test_tasks, theta0, refs, rngs["eval"]


def cmd_infer(args, cfg):
    model, phi = load_policy(os.path.join(cfg.out_dir, "policy.lohp"))
    test_tasks, theta0, refs, rng = _test_setup(cfg)
    thetas = []
    for task, ref in zip(test_tasks, refs):
        theta, _ = infer_weights(model, phi, task, max(1, inference_steps(ref.T, cfg.train.k)), rng, s0=theta0)
        thetas.append(theta)
    N = max(1, inference_steps(refs[0].T, cfg.train.k))
    lat = median_latency(model, phi, test_tasks[0], N, rng, cfg.eval.latency_runs, s0=theta0)
    np.save(os.path.join(cfg.out_dir, "generated.npy"), np.array(thetas))
    print(f"generated {len(thetas)} weight vectors; median latency {1e3 * lat:.3f} ms at N={N}")
    return EXIT_OK


def cmd_eval(args, cfg):
    thetas = np.load(os.path.join(cfg.out_dir, "generated.npy"))
    test_tasks, _, refs, _ = _test_setup(cfg)
    gen = [_score(cfg, t, th) for t, th in zip(test_tasks, thetas)]
    ref = [_score(cfg, t, r.states[-1]) for t, r in zip(test_tasks, refs)]
    report = {"gen_loss": float(np.mean([l for _, l in gen])), "ref_loss": float(np.mean([l for _, l in ref]))}
    if gen[0][0] is not None:
        report["gen_accuracy"] = float(np.mean([a for a, _ in gen]))
        report["ref_accuracy"] = float(np.mean([a for a, _ in ref]))
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as fh:
        json.dump({"config": render_config(cfg), "metrics": report}, fh, indent=2)
    for k, v in report.items():
        print(f"{k:14s} {v:.4f}")
    return EXIT_OK


def cmd_diagnose(args, cfg):
    rngs = seed_streams(cfg.seeds[0])
    train_tasks, _, theta0 = build_suite(cfg, rngs["suite"])
    trajs, _ = prepare_offline(cfg, train_tasks, theta0, rngs["prep"], cfg.train.k)
    rows, fallback = project_trajectories_2d([t.states for t in trajs])
    path = os.path.join(cfg.out_dir, "trajectories.csv")
    with open(path, "w") as fh:
        fh.write("traj_id,step,u,v\n")
        fh.writelines(f"{a},{b},{u!r},{v!r}\n" for a, b, u, v in rows)
    print(f"wrote {len(rows)} rows to {path}" + (" (coordinate fallback)" if fallback else ""))
    return EXIT_OK


def print_verdicts(verdicts, out=None):
    out = sys.stdout if out is None else out
    print(f"{'claim':32s} {'instance':12s} {'lhs':>12s} {'rhs':>12s} {'rel_error':>10s}  verdict", file=out)
    for v in verdicts:
        print(f"{v['claim']:32s} {v['instance']:12s} {v['lhs']:12.5g} {v['rhs']:12.5g} {v['rel_error']:10.2e}  "
              f"{'PASS' if v['passed'] else 'FAIL'}", file=out)


def cmd_verify(args, cfg):
    cfg = replace(cfg, eval=replace(cfg.eval, microenvs=max(cfg.eval.microenvs, 1)))
    verdicts = _verify(cfg, [], [], [], None, cfg.seeds[0])
    print_verdicts(verdicts)
    return EXIT_OK if all(v["passed"] for v in verdicts) else EXIT_VERIFY


def cmd_pipeline(args, cfg):
    report = run_pipeline(cfg)
    for name, m in sorted(report["metrics"].items()):
        print(f"{name:24s} {m['mean']:.4f} ± {m['std']:.4f} (n={m['n']})")
    if report["verdicts"]:
        print_verdicts(report["verdicts"])
    print(f"report written to {os.path.join(cfg.out_dir, 'report.json')}")
    return EXIT_OK if all(v["passed"] for v in report["verdicts"]) else EXIT_VERIFY


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "diagnose": cmd_diagnose, "verify": cmd_verify, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"lohp: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(cfg.out_dir, exist_ok=True)
    try:
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, StoreFormatError, OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"lohp {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_PHASE


if __name__ == "__main__":
    sys.exit(main())
