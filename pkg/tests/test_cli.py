import csv
import json

import numpy as np
import pytest

from timedit.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from timedit.data import TimeSeriesBatch, gen_sine, write_csv, write_dataset
from timedit.pde import PdeSpec, pde_dataset

MODEL = """model:
  d_model: 16
  n_heads: 2
  n_blocks: 1
  L_max: 16
  K_max: {K}
  T: 10
  freq_dim: 8
  ff_mult: 2
diffusion:
  T: 10
  beta_start: 0.01
  beta_end: 0.5
training:
  steps: 6
  batch_size: 4
  lr: 0.001
  log_every: 100
"""


def _write(tmp_path, body, K=2, name="run.yaml"):
    p = tmp_path / name
    p.write_text(MODEL.format(K=K) + body)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_dataset(gen_sine(6, 16, 2, np.random.default_rng(0)), root / "data")
    cfg = _write(root, "data:\n  path: data\ntask:\n  horizon: 4\n  n_samples: 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == EXIT_OK
    return root, cfg


def _run(cfg, cmd, out, *extra):
    return main([cmd, "--config", str(cfg), "--out", str(out), *extra])


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_outputs(trained):
    root, _ = trained
    run = root / "run"
    assert (run / "model.ckpt").exists()
    assert len(_read_rows(run / "loss.csv")) == 6
    assert json.loads((run / "train.json").read_text())["steps"] == 6


def test_train_rerun_identical(trained, tmp_path):
    root, cfg = trained
    assert _run(cfg, "train", tmp_path) == EXIT_OK
    assert (tmp_path / "loss.csv").read_bytes() == (root / "run" / "loss.csv").read_bytes()
    assert (tmp_path / "model.ckpt").read_bytes() == (root / "run" / "model.ckpt").read_bytes()


def test_train_seed_override_changes_curve(trained, tmp_path):
    root, cfg = trained
    assert _run(cfg, "train", tmp_path, "--seed", "5") == EXIT_OK
    assert (tmp_path / "loss.csv").read_bytes() != (root / "run" / "loss.csv").read_bytes()


def test_forecast_deterministic(trained, tmp_path):
    root, cfg = trained
    ck = str(root / "run" / "model.ckpt")
    for d in ("a", "b"):
        assert _run(cfg, "forecast", tmp_path / d, "--checkpoint", ck) == EXIT_OK
    for f in ("samples.npy", "median.csv", "quantiles.csv", "metrics.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    m = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert {"MSE", "MAE", "RMSE", "CRPS", "CRPS_sum", "baseline_MSE"} <= set(m)
    q = _read_rows(tmp_path / "a" / "quantiles.csv")
    assert len(q) == 6 * 4 * 2 and len(q[0]) == 3 + 19


def test_eval_matches_pipeline_crps(trained, tmp_path):
    root, cfg = trained
    out = tmp_path / "fc"
    assert _run(cfg, "forecast", out, "--checkpoint", str(root / "run" / "model.ckpt")) == EXIT_OK
    assert main(["eval", "--pred", str(out / "samples.npy"), "--truth", str(out / "truth.npy"),
                 "--mask", str(out / "eval_mask.npy"), "--metrics", "MSE,CRPS", "--out", str(tmp_path / "ev")]) == 0
    pipe = json.loads((out / "metrics.json").read_text())
    ev = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert ev["CRPS"] == pipe["CRPS"] and ev["MSE"] == pipe["MSE"]


def test_eval_perfect_and_swapped(tmp_path):
    truth = np.random.default_rng(0).standard_normal((2, 8, 2))
    np.save(tmp_path / "t.npy", truth)
    np.save(tmp_path / "swap.npy", truth[..., ::-1])
    assert main(["eval", "--pred", str(tmp_path / "t.npy"), "--truth", str(tmp_path / "t.npy"),
                 "--metrics", "MSE,MAE,RMSE,CRPS", "--out", str(tmp_path / "p")]) == 0
    perfect = json.loads((tmp_path / "p" / "metrics.json").read_text())
    assert perfect == {"MSE": 0.0, "MAE": 0.0, "RMSE": 0.0, "CRPS": 0.0}
    assert main(["eval", "--pred", str(tmp_path / "swap.npy"), "--truth", str(tmp_path / "t.npy"),
                 "--out", str(tmp_path / "s")]) == 0
    swapped = json.loads((tmp_path / "s" / "metrics.json").read_text())
    assert swapped["MSE"] > 0 and swapped["MAE"] > 0 and swapped["CRPS"] > 0


def test_eval_errors(tmp_path, capsys):
    np.save(tmp_path / "a.npy", np.zeros((2, 4, 1)))
    np.save(tmp_path / "b.npy", np.zeros((2, 5, 1)))
    assert main(["eval", "--pred", str(tmp_path / "a.npy"), "--truth", str(tmp_path / "b.npy")]) == EXIT_USAGE
    assert main(["eval", "--pred", str(tmp_path / "a.npy")]) == EXIT_USAGE
    assert main(["eval", "--pred", str(tmp_path / "a.npy"), "--truth", str(tmp_path / "a.npy"),
                 "--metrics", "SMAPE"]) == EXIT_USAGE
    assert main(["eval", "--pred", str(tmp_path / "x.npy"), "--truth", str(tmp_path / "a.npy")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_impute_and_sweep(trained, tmp_path):
    root, cfg = trained
    ck = str(root / "run" / "model.ckpt")
    assert _run(cfg, "impute", tmp_path / "one", "--checkpoint", ck) == EXIT_OK
    assert "CRPS" in json.loads((tmp_path / "one" / "metrics.json").read_text())
    sweep = _write(tmp_path, "data:\n  path: " + str(root / "data") + "\ntask:\n  sweep: true\n  n_samples: 2\n")
    assert _run(sweep, "impute", tmp_path / "sw", "--checkpoint", ck) == EXIT_OK
    rep = json.loads((tmp_path / "sw" / "metrics.json").read_text())
    assert sorted(rep["per_ratio"]) == ["0.125", "0.25", "0.375", "0.5"] and "average" in rep


def test_generate(trained, tmp_path):
    root, _ = trained
    cfg = _write(tmp_path, "task:\n  n_generate: 3\n  length: 12\n")
    assert _run(cfg, "generate", tmp_path, "--checkpoint", str(root / "run" / "model.ckpt")) == EXIT_OK
    assert np.load(tmp_path / "samples.npy").shape == (1, 3, 12, 2)


def test_detect_with_labels(trained, tmp_path):
    root, _ = trained
    x = np.sin(0.3 * np.arange(40))[None, :, None]
    x[0, 20] += 6
    write_csv(TimeSeriesBatch(np.repeat(x, 2, axis=2), np.ones((1, 40, 2))), tmp_path / "series.csv")
    lab = np.zeros((1, 40, 1))
    lab[0, 20] = 1
    write_csv(TimeSeriesBatch(lab, np.ones_like(lab)), tmp_path / "labels.csv")
    cfg = _write(tmp_path, "data:\n  path: series.csv\n  labels_path: labels.csv\n"
                           "task:\n  window: 16\n  n_samples: 2\n  percentiles: [99, 95]\n")
    assert _run(cfg, "detect", tmp_path / "out", "--checkpoint", str(root / "run" / "model.ckpt")) == EXIT_OK
    rows = _read_rows(tmp_path / "out" / "labels.csv")
    assert len(rows) == 40 and "truth" in rows[0]
    m = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert {"F1", "precision", "recall", "threshold"} <= set(m) and len(m["sweep"]) == 2


def test_missing_data_path(tmp_path, capsys):
    cfg = _write(tmp_path, "data:\n  path: nowhere.csv\n")
    assert _run(cfg, "train", tmp_path / "o") == EXIT_USAGE
    err = capsys.readouterr().err
    assert "nowhere.csv" in err and "Traceback" not in err


@pytest.mark.parametrize("argv", [
    ["train"],
    ["bogus"],
    ["train", "--config", "absent.yaml"],
    ["forecast", "--config", "{cfg}", "--checkpoint", "missing.ckpt"],
    ["forecast", "--config", "{cfg}", "--samples", "0"],
    ["detect", "--config", "{cfg}", "--percentile", "140"],
])
def test_usage_errors_exit_one(tmp_path, argv):
    cfg = _write(tmp_path, "")
    argv = [a.replace("{cfg}", str(cfg)) for a in argv]
    code = None
    try:
        code = main(argv + ["--out", str(tmp_path / "o")])
    except SystemExit as exc:
        code = exc.code
    assert code == EXIT_USAGE


def test_bad_config_key_exit_one(tmp_path, capsys):
    cfg = _write(tmp_path, "training:\n  stepz: 3\n")
    assert _run(cfg, "train", tmp_path / "o") == EXIT_USAGE
    assert f"{cfg}:" in capsys.readouterr().err


def test_numeric_failure_exit_two(tmp_path, capsys):
    x = gen_sine(4, 16, 2, np.random.default_rng(0))
    write_dataset(x, tmp_path / "data")
    cfg = _write(tmp_path, "data:\n  path: data\ntraining:\n  lr: 1.0e+30\n  grad_clip: 1.0e+30\n")
    assert _run(cfg, "train", tmp_path / "o") == EXIT_NUMERIC
    assert "numerical" in capsys.readouterr().err


# ---------------------------------------------------------------- physics demo

@pytest.fixture(scope="module")
def physics_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("phys")
    spec = PdeSpec("advection", 1 / 8, 0.02, 8, {"c": 1.0})
    write_dataset(pde_dataset(spec, 4, 16, np.random.default_rng(0)), root / "data")
    body = ("data:\n  path: data\n  normalization: none\ntask:\n  horizon: 4\n  n_samples: 2\n"
            "physics:\n  family: advection\n  dx: 0.125\n  dt: 0.02\n  coeffs: {{c: 1.0}}\n"
            "  step: 1.0e-5\n  iters: {iters}\n  logp_mc_samples: 1\n")
    cfgs = {k: _write(root, body.format(iters=k), K=8, name=f"p{k}.yaml") for k in (0, 2)}
    assert main(["train", "--config", str(cfgs[0]), "--out", str(root / "run")]) == EXIT_OK
    return root, cfgs


def test_physics_demo_zero_iterations_identity(physics_run, tmp_path):
    root, cfgs = physics_run
    assert _run(cfgs[0], "physics-demo", tmp_path, "--checkpoint", str(root / "run" / "model.ckpt")) == EXIT_OK
    assert (tmp_path / "refined.csv").read_bytes() == (tmp_path / "unrefined.csv").read_bytes()
    assert _read_rows(tmp_path / "diagnostics.csv") == []


def test_physics_demo_diagnostics_rows(physics_run, tmp_path):
    root, cfgs = physics_run
    assert _run(cfgs[2], "physics-demo", tmp_path, "--checkpoint", str(root / "run" / "model.ckpt")) == EXIT_OK
    rows = _read_rows(tmp_path / "diagnostics.csv")
    pairs = sorted((int(r["sample"]), int(r["iteration"])) for r in rows)
    n = 2 * 4
    assert pairs == sorted((s, i) for s in range(n) for i in range(2))
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"unrefined", "refined"}


def test_physics_demo_requires_raw_units(physics_run, tmp_path):
    root, cfgs = physics_run
    cfg = tmp_path / "std.yaml"
    cfg.write_text(cfgs[0].read_text().replace("normalization: none", "normalization: standardize")
                   .replace("path: data", f"path: {root / 'data'}"))
    assert _run(cfg, "physics-demo", tmp_path / "o", "--checkpoint", str(root / "run" / "model.ckpt")) == EXIT_USAGE
