import json
import time
from dataclasses import replace

import pytest

from lohp import cli, pipeline
from lohp.pipeline import (ConfigError, ExperimentConfig, PolicyConfig, metric_fingerprint, parse_config,
                           render_config, run_pipeline, smoke_config)


def test_config_round_trip():
    for cfg in (ExperimentConfig(), smoke_config(),
                replace(ExperimentConfig(), seeds=(7,), policy=PolicyConfig(trunk_hidden=(8, 8)))):
        assert parse_config(render_config(cfg)) == cfg


def test_config_comments_and_defaults():
    cfg = parse_config("# a comment\n\ntrain.k = 3  # trailing\nseeds = [4]\n")
    assert cfg.train.k == 3 and cfg.seeds == (4,) and cfg.suite == ExperimentConfig().suite


@pytest.mark.parametrize("text,msg", [
    ("train.nope = 1", "unknown key"),
    ("bogus.k = 1", "unknown section"),
    ("colour = 1", "unknown key"),
    ("train.k = 2\ntrain.k = 3", "duplicate"),
    ("train.k = 2.5", "integer"),
    ("train.k", "key = value"),
    ("train.k = [", "bad value"),
    ("train.mode = \"sideways\"", "mode"),
    ("seeds = []", "seed"),
    ("prep.step_rule = \"inverse_l\"", "quadratic"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_smoke_pipeline_under_a_minute(tmp_path):
    t = time.perf_counter()
    report = run_pipeline(smoke_config(), out_dir=str(tmp_path))
    assert time.perf_counter() - t < 60
    for name in ("report.json", "trajectories.csv", "cosine_hist.csv", "ksweep.csv", "store.lohp"):
        assert (tmp_path / name).exists()
    assert all(v["passed"] for v in report["verdicts"])
    claims = {v["claim"] for v in report["verdicts"]}
    assert {"flow_identity", "composition", "flow_identity_negative_control", "error_decomposition"} <= claims
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert metric_fingerprint(on_disk) == metric_fingerprint(report)


def test_five_seeds_give_stds_over_five_runs():
    cfg = replace(smoke_config(), seeds=(1, 2, 3, 4, 5), eval=replace(smoke_config().eval, verify=False))
    report = run_pipeline(cfg, write=False)
    for m in report["metrics"].values():
        assert m["n"] == 5 and len(m["values"]) == 5 and m["std"] >= 0.0
    assert report["metrics"]["gen_loss"]["std"] > 0.0


def test_rerun_is_bit_identical():
    cfg = replace(smoke_config(), seeds=(3,))
    a = run_pipeline(cfg, write=False)
    b = run_pipeline(cfg, write=False)
    assert metric_fingerprint(a) == metric_fingerprint(b)
    assert "timings" in a and "latency_ms" in a["timings"]


def test_failed_phase_keeps_completed_report(tmp_path, monkeypatch):
    real = pipeline.run_seed

    def flaky(cfg, seed, out_dir=None):
        if seed == 2:
            raise FloatingPointError("diverged")
        return real(cfg, seed, out_dir)

    monkeypatch.setattr(pipeline, "run_seed", flaky)
    cfg = replace(smoke_config(), seeds=(1, 2, 3))
    with pytest.raises(FloatingPointError):
        run_pipeline(cfg, out_dir=str(tmp_path))
    partial = json.loads((tmp_path / "report.json").read_text())
    assert partial["completed_seeds"] == [1] and partial["failed_seed"] == 2
    assert partial["error"] == "diverged" and partial["metrics"]["gen_loss"]["n"] == 1


# -- CLI ------------------------------------------------------------------------------

def write_cfg(tmp_path, cfg):
    path = tmp_path / "exp.cfg"
    path.write_text(render_config(replace(cfg, out_dir=str(tmp_path / "out"))))
    return str(path)


def test_cli_phases_end_to_end(tmp_path, capsys):
    path = write_cfg(tmp_path, smoke_config())
    for cmd in ("prepare", "train", "infer", "eval", "diagnose"):
        assert cli.main([cmd, "--config", path]) == cli.EXIT_OK, cmd
    out = tmp_path / "out"
    for name in ("store.lohp", "policy.lohp", "generated.npy", "report.json", "trajectories.csv"):
        assert (out / name).exists()
    assert "gen_loss" in capsys.readouterr().out


def test_cli_verify_prints_table(tmp_path, capsys):
    assert cli.main(["verify", "--config", write_cfg(tmp_path, smoke_config())]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "flow_identity" in out and "PASS" in out and "FAIL" not in out


def test_cli_verification_failure_exit_code(tmp_path, monkeypatch):
    bad = [{"claim": "x", "instance": "y", "lhs": 1.0, "rhs": 0.0, "rel_error": 1.0, "passed": False}]
    monkeypatch.setattr(cli, "_verify", lambda *a, **k: bad)
    assert cli.main(["verify", "--config", write_cfg(tmp_path, smoke_config())]) == cli.EXIT_VERIFY


def test_cli_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["levitate"])
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--mode", "sideways"])
    assert exc.value.code == cli.EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.nope = 1\n")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_USAGE
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_USAGE


def test_cli_phase_failure_exit_code(tmp_path):
    path = write_cfg(tmp_path, smoke_config())
    assert cli.main(["train", "--config", path, "--store", str(tmp_path / "absent.lohp")]) == cli.EXIT_PHASE
    (tmp_path / "junk.lohp").write_bytes(b"not a store")
    assert cli.main(["train", "--config", path, "--store", str(tmp_path / "junk.lohp")]) == cli.EXIT_PHASE


def test_cli_flag_overrides(tmp_path):
    args = cli.build_parser().parse_args(["pipeline", "--seed", "9", "--mode", "lo_op", "--out", str(tmp_path)])
    cfg = cli._config(args)
    assert cfg.seeds == (9,) and cfg.train.mode == "lo_op" and cfg.out_dir == str(tmp_path)
    args = cli.build_parser().parse_args(["pipeline", "--mode", "hypernet"])
    assert cli._config(args).train.mode == "hypernet_baseline"
