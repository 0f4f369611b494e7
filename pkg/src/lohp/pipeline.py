"""Experiment configuration and the prepare → train → infer → eval → diagnose → verify pipeline.

Config files are plain text, one ``section.key = <JSON value>`` per line;
``#`` starts a comment. Every field has a default, unknown keys are errors,
and ``parse_config(render_config(c)) == c``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .eval import (cos_sim_diagnostic, eval_generated_weights, inference_steps, infer_weights,
                   median_latency, project_trajectories_2d)
from .nn import MlpSpec, gaussian_sample, split_rng
from .optimizers import OptimizerConfig, prepare_trajectory
from .policy import PolicyArch, PolicyModel
from .store import sample_subtrajectories, truncate_trajectory
from .tasks import (Episode, QuadraticTask, make_blob_episodes, quadratic_loss_grad, random_quadratic,
                    task_conditioning, task_eval_loss)
from .theory import (balanced_microenv, random_microenv, random_partition, train_microenv,
                     verify_theorem1, verify_theorem2_composition, verify_theorem3_decomposition)
from .training import TrainConfig, train_hypernet, train_policy

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SuiteConfig:
    kind: str = "blobs"  # blobs | quadratic
    n_train: int = 40
    n_test: int = 20
    n_classes: int = 3
    dim_x: int = 2
    samples_per_class: int = 20
    separation: float = 4.0
    shift_scale: float = 1.0
    jitter: float = 0.3
    quad_dim: int = 4
    max_condition: float = 10.0


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple = (16,)


@dataclass(frozen=True)
class PrepConfig:
    policies: tuple = ("sgd", "adam")  # cycled over the training tasks
    learning_rate: float = 0.005
    step_rule: str = "fixed"  # fixed | inverse_l (quadratics: step 1/l, i.e. plain gradient descent)
    max_epochs: int = 32
    early_stop_patience: int = 5
    batch_size: int = 10
    sam: bool = False
    sam_rho: float = 0.05
    samples_per_trajectory: int = 64
    full_span_prob: float = 0.1
    shared_init: bool = True  # one θ_0 ~ N(0, I) per seed for every trajectory and every inference


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 8
    encoder_hidden: int = 16
    trunk_hidden: tuple = (64,)
    sigma_floor: float = 1e-3
    sigma_init: float = 0.0
    coeff_inputs: str = "state"  # context | state: what the log flow coefficient sees besides the task
    coeff_hidden: int = 16


@dataclass(frozen=True)
class EvalConfig:
    latency_runs: int = 50
    cos_pairs: int = 200
    ksweep: tuple = ()  # extra k values; each one retrains the policy
    verify: bool = True
    microenvs: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    net: NetConfig = field(default_factory=NetConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=4000, optimizer="adam",
                                                                   reward_scale=30.0))
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple = (1, 2, 3, 4, 5)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.suite.kind not in ("blobs", "quadratic"):
            raise ConfigError(f"unknown suite kind {self.suite.kind!r}")
        if self.prep.step_rule not in ("fixed", "inverse_l"):
            raise ConfigError(f"unknown step rule {self.prep.step_rule!r}")
        if self.prep.step_rule == "inverse_l" and self.suite.kind != "quadratic":
            raise ConfigError("step_rule inverse_l needs the quadratic suite")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.train.mode == "hypernet_baseline" and self.suite.kind != "blobs":
            raise ConfigError("the hypernet baseline runs on the blobs suite only")


_SECTIONS = {"suite": SuiteConfig, "net": NetConfig, "prep": PrepConfig, "policy": PolicyConfig,
             "train": TrainConfig, "eval": EvalConfig}
_TOP = ("seeds", "out_dir")


def _coerce(name, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{name}: unsupported field type")


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{sec}.{f.name} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    for name in _TOP:
        v = getattr(cfg, name)
        lines.append(f"{name} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    base = ExperimentConfig()
    sections = {sec: {} for sec in _SECTIONS}
    top = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            value = json.loads(val)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc.msg}") from None
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {sec!r}")
            defaults = {f.name: getattr(getattr(base, sec), f.name) for f in fields(_SECTIONS[sec])}
            if name not in defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            sections[sec][name] = _coerce(key, defaults[name], value)
        else:
            if key not in _TOP:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(key, getattr(base, key), value)
    try:
        parts = {sec: replace(getattr(base, sec), **kv) for sec, kv in sections.items()}
        return ExperimentConfig(**parts, **top)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def smoke_config(out_dir="runs/smoke") -> ExperimentConfig:
    """2 quadratic tasks, T = 8, k = 2, 200 policy steps."""
    return ExperimentConfig(
        suite=SuiteConfig(kind="quadratic", n_train=2, n_test=2, quad_dim=3, max_condition=5.0),
        prep=PrepConfig(policies=("sgd",), step_rule="inverse_l", max_epochs=8, early_stop_patience=100,
                        samples_per_trajectory=16, full_span_prob=0.25),
        policy=PolicyConfig(trunk_hidden=(16,)),
        train=TrainConfig(epochs=200, k=2, batch_size=8, optimizer="adam"),
        eval=EvalConfig(latency_runs=5, cos_pairs=20, microenvs=1),
        seeds=(1,), out_dir=out_dir)


# -- phases --------------------------------------------------------------------------

def net_spec(cfg: ExperimentConfig) -> MlpSpec | None:
    if cfg.suite.kind != "blobs":
        return None
    s = cfg.suite
    return MlpSpec((s.dim_x, *cfg.net.hidden, s.n_classes))


def state_dim(cfg: ExperimentConfig) -> int:
    spec = net_spec(cfg)
    return spec.n_params if spec is not None else cfg.suite.quad_dim


def seed_streams(seed):
    """Independent streams for suite, preparation, training and evaluation."""
    suite, prep, train, ev = split_rng(seed, 4)
    return {"suite": suite, "prep": prep, "train": train, "eval": ev}


def build_suite(cfg: ExperimentConfig, rng):
    """(train tasks, test tasks, shared θ_0 or None); deterministic in `rng`."""
    s = cfg.suite
    if s.kind == "blobs":
        tasks = make_blob_episodes(rng, s.n_train + s.n_test, s.n_classes, s.dim_x, s.samples_per_class,
                                   s.separation, s.shift_scale, s.jitter)
    else:
        tasks = [random_quadratic(rng, s.quad_dim, s.max_condition) for _ in range(s.n_train + s.n_test)]
    theta0 = gaussian_sample(rng, state_dim(cfg)) if cfg.prep.shared_init else None
    return tasks[:s.n_train], tasks[s.n_train:], theta0


def optimizer_config(cfg: ExperimentConfig, policy, task=None) -> OptimizerConfig:
    p = cfg.prep
    lr = p.learning_rate
    if p.step_rule == "inverse_l":
        lr = 1.0 / task.l
    return OptimizerConfig(policy=policy, learning_rate=lr, sam_enabled=p.sam, sam_rho=p.sam_rho,
                           max_epochs=p.max_epochs, early_stop_patience=p.early_stop_patience,
                           batch_size=p.batch_size)


def prepare_offline(cfg: ExperimentConfig, tasks, theta0, rng, k):
    """Full trajectories (k-truncated) plus their sampled sub-trajectory records."""
    spec = net_spec(cfg)
    trajs, samples = [], []
    for i, task in enumerate(tasks):
        policy = cfg.prep.policies[i % len(cfg.prep.policies)]
        tr = truncate_trajectory(prepare_trajectory(task, spec, optimizer_config(cfg, policy, task), rng, theta0), k)
        trajs.append(tr)
        samples += sample_subtrajectories(tr, cfg.prep.samples_per_trajectory, k, rng,
                                          conditioning=task_conditioning(task),
                                          full_span_prob=cfg.prep.full_span_prob)
    return trajs, samples


def policy_model(cfg: ExperimentConfig) -> PolicyModel:
    p = cfg.policy
    x_dim = cfg.suite.dim_x if cfg.suite.kind == "blobs" else cfg.suite.quad_dim + 1
    return PolicyModel(PolicyArch(state_dim(cfg), x_dim, embed_dim=p.embed_dim, encoder_hidden=p.encoder_hidden,
                                  trunk_hidden=p.trunk_hidden, sigma_floor=p.sigma_floor, sigma_init=p.sigma_init,
                                  coeff_inputs=p.coeff_inputs, coeff_hidden=p.coeff_hidden))


def reference_run(cfg: ExperimentConfig, task, theta0, rng, k):
    """The optimizer baseline on a test task; its T fixes N = T/k."""
    tr = prepare_trajectory(task, net_spec(cfg), optimizer_config(cfg, "sgd", task), rng, theta0)
    return truncate_trajectory(tr, k) if tr.T >= k else tr


def _score(cfg, task, theta):
    """(accuracy or None, held-out loss)."""
    spec = net_spec(cfg)
    loss = float(task_eval_loss(task, spec, theta))
    if isinstance(task, Episode):
        return eval_generated_weights(theta, task, spec), loss
    return None, loss


def _evaluate_policy(cfg, model, phi, test, refs, theta0, rng, k):
    gen_acc, gen_loss, thetas = [], [], []
    for task, ref in zip(test, refs):
        N = max(1, inference_steps(ref.T, k))
        theta, _ = infer_weights(model, phi, task, N, rng, s0=theta0)
        acc, loss = _score(cfg, task, theta)
        thetas.append(theta)
        gen_loss.append(loss)
        if acc is not None:
            gen_acc.append(acc)
    return gen_acc, gen_loss, thetas


def run_seed(cfg: ExperimentConfig, seed, out_dir=None):
    """One full pass for one seed. Returns (metrics, timings, tables, verdicts)."""
    rngs = seed_streams(seed)
    timings, metrics, tables = {}, {}, {}
    k = cfg.train.k

    t = time.perf_counter()
    train_tasks, test_tasks, theta0 = build_suite(cfg, rngs["suite"])
    trajs, samples = prepare_offline(cfg, train_tasks, theta0, rngs["prep"], k)
    timings["prepare_s"] = time.perf_counter() - t
    metrics["offline_T_mean"] = float(np.mean([tr.T for tr in trajs]))
    if out_dir:
        from .store import write_store
        write_store(os.path.join(out_dir, "store.lohp"), samples)

    t = time.perf_counter()
    model = policy_model(cfg)
    if cfg.train.mode == "hypernet_baseline":
        net, psi, rep = train_hypernet(train_tasks, net_spec(cfg), cfg.train, rngs["train"])
    else:
        phi, rep = train_policy(samples, model, cfg.train, rngs["train"])
        metrics["composition_violations"] = float(rep["composition"]["violations"])
    curve = rep["loss_curve"]
    metrics["train_loss_final"] = float(np.mean(curve[-50:])) if curve else float("nan")
    timings["train_s"] = time.perf_counter() - t
    tables["loss_curve"] = curve

    t = time.perf_counter()
    ev = rngs["eval"]
    refs = [reference_run(cfg, task, theta0, ev, k) for task in test_tasks]
    ref_scores = [_score(cfg, task, ref.states[-1]) for task, ref in zip(test_tasks, refs)]
    if cfg.train.mode == "hypernet_baseline":
        thetas = [net.generate(psi, task.unlabeled_x) for task in test_tasks]
        scores = [_score(cfg, task, th) for task, th in zip(test_tasks, thetas)]
        gen_acc = [a for a, _ in scores if a is not None]
        gen_loss = [l for _, l in scores]
    else:
        gen_acc, gen_loss, thetas = _evaluate_policy(cfg, model, phi, test_tasks, refs, theta0, ev, k)
    metrics["gen_loss"] = float(np.mean(gen_loss))
    metrics["ref_loss"] = float(np.mean([l for _, l in ref_scores]))
    if gen_acc:
        metrics["gen_accuracy"] = float(np.mean(gen_acc))
        metrics["ref_accuracy"] = float(np.mean([a for a, _ in ref_scores]))
        metrics["accuracy_ratio"] = metrics["gen_accuracy"] / metrics["ref_accuracy"]
    timings["infer_eval_s"] = time.perf_counter() - t

    if cfg.train.mode != "hypernet_baseline":
        N = max(1, inference_steps(refs[0].T, k))
        timings["latency_ms"] = 1e3 * median_latency(model, phi, test_tasks[0], N, ev,
                                                     cfg.eval.latency_runs, s0=theta0)
        t = time.perf_counter()
        cos = cos_sim_diagnostic(model, phi, trajs, [task_conditioning(tk) for tk in train_tasks], k,
                                 cfg.eval.cos_pairs, ev)
        metrics["cos_sim_mean"] = cos.mean
        tables["cosine_hist"] = cos.rows()
        tables["ksweep"] = _ksweep(cfg, samples, model, phi, trajs, train_tasks, test_tasks, theta0, seed,
                                   refs, gen_acc, gen_loss)
        timings["diagnose_s"] = time.perf_counter() - t
    rows, fallback = project_trajectories_2d([tr.states for tr in trajs])
    tables["trajectories"] = rows
    metrics["projection_fallback"] = float(fallback)

    verdicts = []
    if cfg.eval.verify:
        t = time.perf_counter()
        verdicts = _verify(cfg, test_tasks, refs, thetas, theta0, seed)
        timings["verify_s"] = time.perf_counter() - t
    return metrics, timings, tables, verdicts


def _ksweep(cfg, samples, model, phi, trajs, train_tasks, test_tasks, theta0, seed, refs, gen_acc, gen_loss):
    k0 = cfg.train.k
    first = refs[0]
    rows = [{"k": k0, "N": inference_steps(first.T, k0),
             "accuracy": float(np.mean(gen_acc)) if gen_acc else None, "loss": float(np.mean(gen_loss))}]
    for k in cfg.eval.ksweep:
        if k == k0:
            continue
        rngs = seed_streams(seed)
        build_suite(cfg, rngs["suite"])
        _, ks = prepare_offline(cfg, train_tasks, theta0, rngs["prep"], k)
        kphi, _ = train_policy(ks, model, replace(cfg.train, k=k), rngs["train"])
        krefs = [reference_run(cfg, task, theta0, rngs["eval"], k) for task in test_tasks]
        acc, loss, _ = _evaluate_policy(cfg, model, kphi, test_tasks, krefs, theta0, rngs["eval"], k)
        rows.append({"k": k, "N": inference_steps(krefs[0].T, k),
                     "accuracy": float(np.mean(acc)) if acc else None, "loss": float(np.mean(loss))})
    return sorted(rows, key=lambda r: r["k"])


def _verify(cfg, test_tasks, refs, thetas, theta0, seed):
    out = []
    rng = split_rng(seed, 5)[4]
    for j in range(cfg.eval.microenvs):
        env = train_microenv(random_microenv(rng, 4, 3), 5000, 0.3)
        v = verify_theorem1(env, 0, 3, 0, check_precondition=False)
        ok = env.max_residual <= 1e-6 and v.passed
        out.append({"claim": "flow_identity", "instance": f"microenv{j}", "lhs": float(v.lhs.sum()),
                    "rhs": float(v.rhs.sum()), "rel_error": v.rel_error, "passed": bool(ok)})
        worst = None
        for _ in range(100):
            c = verify_theorem2_composition(env, random_partition(rng, env.n_layers - 1),
                                            [int(rng.integers(s)) for s in env.sizes])
            if worst is None or not c.holds:
                worst = c
        out.append({"claim": "composition", "instance": f"microenv{j}", "lhs": abs(worst.telescoped),
                    "rhs": worst.sum_segment_residuals, "rel_error": 0.0, "passed": bool(worst.holds)})
        neg = verify_theorem1(random_microenv(rng, 4, 3), 0, 3, 0, check_precondition=False)
        out.append({"claim": "flow_identity_negative_control", "instance": f"microenv{j}",
                    "lhs": float(neg.lhs.sum()), "rhs": float(neg.rhs.sum()), "rel_error": neg.rel_error,
                    "passed": bool(not neg.passed)})
    for i, (task, ref, theta) in enumerate(zip(test_tasks, refs, thetas)):
        if isinstance(task, QuadraticTask) and cfg.prep.step_rule == "inverse_l":
            v = verify_theorem3_decomposition(task, theta, ref.states[-1], ref.T, ref.states[0])
            out.append({"claim": "error_decomposition", "instance": f"quadratic{i}", "lhs": v.lhs, "rhs": v.rhs,
                        "rel_error": 0.0, "passed": bool(v.holds)})
    return out


# -- report --------------------------------------------------------------------------

def _stats(values):
    v = np.array(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size), "values": [float(x) for x in v]}


def _collect(per_seed):
    names = sorted(set().union(*per_seed)) if per_seed else []
    return {n: _stats([m[n] for m in per_seed if n in m]) for n in names}


def run_pipeline(cfg: ExperimentConfig, out_dir=None, write=True) -> dict:
    """All seeds; returns the RunReport dict and (optionally) writes its files to `out_dir`."""
    out_dir = cfg.out_dir if out_dir is None else out_dir
    if write:
        os.makedirs(out_dir, exist_ok=True)
    per_seed, timings, verdicts = [], {}, []
    tables = {}
    for seed in cfg.seeds:
        try:
            m, t, tab, v = run_seed(cfg, seed, out_dir if write else None)
        except Exception as exc:
            # keep what the finished seeds produced, then surface the failure
            if write:
                partial = {"config": render_config(cfg), "completed_seeds": list(cfg.seeds[:len(per_seed)]),
                           "metrics": _collect(per_seed), "failed_seed": seed, "error": str(exc)}
                with open(os.path.join(out_dir, "report.json"), "w") as fh:
                    json.dump(partial, fh, indent=2, sort_keys=True)
            raise
        per_seed.append(m)
        for key, val in t.items():
            timings.setdefault(key, []).append(val)
        for row in v:
            verdicts.append({"seed": seed, **row})
        tables[seed] = tab
    metrics = _collect(per_seed)
    report = {
        "config": render_config(cfg),
        "seeds": list(cfg.seeds),
        "metrics": metrics,
        "ksweep": {str(s): tables[s].get("ksweep", []) for s in cfg.seeds},
        "verdicts": verdicts,
        "timings": {k: _stats(v) for k, v in timings.items()},
    }
    if write:
        write_outputs(report, tables, out_dir)
    return report


def metric_fingerprint(report) -> str:
    """Everything except wall-clock fields, serialized canonically."""
    keep = {k: v for k, v in report.items() if k != "timings"}
    return json.dumps(keep, sort_keys=True)


def write_outputs(report, tables, out_dir):
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    first = report["seeds"][0]
    with open(os.path.join(out_dir, "trajectories.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "step", "u", "v"])
        w.writerows(tables[first]["trajectories"])
    with open(os.path.join(out_dir, "cosine_hist.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "bin_lo", "bin_hi", "count"])
        for seed in report["seeds"]:
            for lo, hi, c in tables[seed].get("cosine_hist", []):
                w.writerow([seed, f"{lo:.1f}", f"{hi:.1f}", c])
    with open(os.path.join(out_dir, "ksweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "k", "N", "accuracy", "loss"])
        for seed in report["seeds"]:
            for row in tables[seed].get("ksweep", []):
                w.writerow([seed, row["k"], row["N"], row["accuracy"], row["loss"]])
