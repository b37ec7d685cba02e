"""Command-line entry point: ``timedit {train,forecast,impute,generate,detect,eval,physics-demo}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DataFormatError, TimeSeriesBatch, chunk_channels, concat, denormalize, load_dataset, normalize, windows
from .diffusion import make_schedule
from .masks import EmptyTargetError, load_mask, random_mask
from .metrics import crps, metrics_point, prf1

logger = logging.getLogger("timedit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- plumbing

def _resolve(cfg_path: Path | None, p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    if not path.is_absolute() and cfg_path is not None:
        path = cfg_path.parent / path
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _long_rows(values: np.ndarray, names: list[str]):
    B, L, K = values.shape
    for b in range(B):
        for j in range(L):
            for k in range(K):
                yield b, j, names[k], float(values[b, j, k])


def _names(batch: TimeSeriesBatch) -> list[str]:
    K = batch.shape[2]
    if batch.channel_names and len(batch.channel_names) >= K:
        return list(batch.channel_names[:K])
    return [f"c{k}" for k in range(K)]


def _schedule(cfg: RunConfig):
    d = cfg.diffusion
    if cfg.model.T != d.T:
        raise ConfigError(f"model.T={cfg.model.T} disagrees with diffusion.T={d.T}")
    return make_schedule(d.T, d.beta_start, d.beta_end)


def _load_data(cfg: RunConfig, cfg_path: Path, evaluation: bool = False, window: bool = True):
    key = cfg.data.eval_path if evaluation and cfg.data.eval_path else cfg.data.path
    path = _resolve(cfg_path, key)
    if path is None:
        raise ConfigError("data.path is not set")
    batch = load_dataset(path, cfg.data.format, cfg.data.sentinels)
    if window:
        L = cfg.data.window or cfg.model.L_max
        if batch.shape[1] > L:
            batch = windows(batch, L, cfg.data.stride)
        if batch.shape[2] > cfg.model.K_max:
            batch = concat(chunk_channels(batch, cfg.model.K_max))
    return normalize(batch, cfg.data.normalization)


def _model(cfg: RunConfig, args):
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "model.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path, expect=cfg.model)
    return model


def _refine(cfg: RunConfig, args):
    if not (args.physics or (cfg.physics is not None and cfg.physics.enabled)):
        return None
    if cfg.physics is None:
        raise ConfigError("--physics given but the config has no physics section")
    from .pde import PdeSpec
    from .physics import EnergyConfig

    if cfg.data.normalization != "none":
        raise ConfigError("physics refinement works in physical units; set data.normalization: none")
    p = cfg.physics
    spec = PdeSpec(p.family, p.dx, p.dt, cfg.model.K_max, dict(p.coeffs))
    ecfg = EnergyConfig(p.alpha, p.step, p.iters, p.logp_mc_samples, p.t_band, p.seed)
    return spec, ecfg


def _emit_task(out: Path, result, batch: TimeSeriesBatch, stats, extra_metrics: dict | None = None) -> dict:
    """Write samples, median/quantile CSVs and metrics for a conditional task."""
    sset = result.samples
    tar = result.split.tar_mask
    np.save(out / "samples.npy", sset.samples)
    np.save(out / "truth.npy", batch.values)
    np.save(out / "eval_mask.npy", tar)
    names = _names(batch)
    median = denormalize(sset.median, stats)
    _write_rows(out / "median.csv", ["series", "step", "channel", "value"], _long_rows(median, names))
    qs = np.stack([denormalize(q, stats) for q in sset.quantiles])
    B, L, K = batch.shape

    def qrows():
        for b in range(B):
            for j in range(L):
                for k in range(K):
                    if tar[b, j, k]:
                        yield [b, j, names[k], *[float(v) for v in qs[:, b, j, k]]]

    _write_rows(out / "quantiles.csv", ["series", "step", "channel", *[f"q{l:.2f}" for l in sset.levels]], qrows())
    metrics = metrics_point(batch.values, sset.median, tar)
    metrics.update(crps(sset.samples, batch.values, tar))
    metrics.update(extra_metrics or {})
    _write_json(out / "metrics.json", metrics)
    return metrics


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig, args, cfg_path: Path) -> int:
    from .model import init_model
    from .train import TrainConfig, train

    data, stats = _load_data(cfg, cfg_path)
    t = cfg.training
    torch.manual_seed(t.seed)
    model = init_model(cfg.model, seed=t.seed)
    tcfg = TrainConfig(t.steps, t.batch_size, t.lr, t.seed, tuple(t.mask_probs), t.grad_clip, t.log_every)
    losses = train(model, data, _schedule(cfg), tcfg)
    out = Path(args.out)
    save_checkpoint(model, out / "model.ckpt", extra={"train": cfg.to_dict()["training"]})
    _write_rows(out / "loss.csv", ["step", "loss"], ((i + 1, float(v)) for i, v in enumerate(losses)))
    tail = np.asarray(losses[-100:], dtype=np.float64)
    _write_json(out / "train.json", {"steps": len(losses), "final_loss": float(np.nanmean(tail)),
                                     "n_series": len(data), "n_parameters": model.n_parameters()})
    print(f"trained {len(losses)} steps, final loss {float(np.nanmean(tail)):.4f}; wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_forecast(cfg: RunConfig, args, cfg_path: Path) -> int:
    from .tasks import forecast

    model = _model(cfg, args)
    batch, stats = _load_data(cfg, cfg_path, evaluation=True)
    n = cfg.task.n_samples or 30
    res = forecast(model, batch, cfg.task.horizon, _schedule(cfg), n=n, seed=cfg.task.seed, refine=_refine(cfg, args))
    tar = res.split.tar_mask
    hist = np.where(res.split.con_mask, batch.values, 0).sum(1) / np.maximum(res.split.con_mask.sum(1), 1)
    baseline = metrics_point(batch.values, np.broadcast_to(hist[:, None, :], batch.shape), tar)["MSE"]
    m = _emit_task(Path(args.out), res, batch, stats, {"baseline_MSE": baseline, "horizon": cfg.task.horizon,
                                                      "n_samples": n})
    print(f"forecast MSE {m['MSE']:.4f} (history-mean baseline {baseline:.4f}), CRPS {m['CRPS']:.4f}")
    return EXIT_OK


def cmd_impute(cfg: RunConfig, args, cfg_path: Path) -> int:
    from .tasks import impute, impute_sweep

    model = _model(cfg, args)
    batch, stats = _load_data(cfg, cfg_path, evaluation=True)
    n = cfg.task.n_samples or 10
    sched = _schedule(cfg)
    out = Path(args.out)
    if cfg.task.sweep:
        rep = impute_sweep(model, batch, sched, cfg.task.ratios, n=n, seed=cfg.task.seed)
        _write_json(out / "metrics.json", rep)
        for r, v in rep["per_ratio"].items():
            print(f"ratio {r}: MSE {v['MSE']:.4f} MAE {v['MAE']:.4f}")
        print(f"average: MSE {rep['average']['MSE']:.4f} MAE {rep['average']['MAE']:.4f}")
        return EXIT_OK
    if cfg.task.mask_path:
        mask = load_mask(_resolve(cfg_path, cfg.task.mask_path))
    else:
        mask = random_mask(batch.shape, cfg.task.ratio, np.random.default_rng(cfg.task.seed))
    res = impute(model, batch, mask, sched, n=n, seed=cfg.task.seed, refine=_refine(cfg, args))
    m = _emit_task(out, res, batch, stats, {"n_samples": n})
    print(f"impute MSE {m['MSE']:.4f} MAE {m['MAE']:.4f} CRPS {m['CRPS']:.4f}")
    return EXIT_OK


def cmd_generate(cfg: RunConfig, args, cfg_path: Path) -> int:
    from .tasks import generate

    model = _model(cfg, args)
    real = None
    K = cfg.model.K_max
    if cfg.data.path or cfg.data.eval_path:
        real, _ = _load_data(cfg, cfg_path, evaluation=True)
        K = real.shape[2]
    L = cfg.task.length or (real.shape[1] if real is not None else cfg.model.L_max)
    B = cfg.task.n_generate
    sset = generate(model, (B, L, K), _schedule(cfg), n=cfg.task.n_samples or 1, seed=cfg.task.seed)
    out = Path(args.out)
    np.save(out / "samples.npy", sset.samples)
    flat = sset.samples.reshape(-1, L, K)
    _write_rows(out / "generated.csv", ["series", "step", "channel", "value"],
                _long_rows(flat, [f"c{k}" for k in range(K)]))
    metrics = {"n_series": int(flat.shape[0]), "length": L, "channels": K}
    if cfg.task.scores and real is not None:
        from .genmetrics import discriminative_score, predictive_score

        m = min(len(real), len(flat))
        r = real.values[:m, -L:]
        metrics["discriminative"] = discriminative_score(r, flat[:m], seed=cfg.task.seed)
        metrics["predictive"] = predictive_score(r, flat[:m], seed=cfg.task.seed)
    _write_json(out / "metrics.json", metrics)
    print(f"generated {flat.shape[0]} series of shape ({L}, {K})")
    return EXIT_OK


def cmd_detect(cfg: RunConfig, args, cfg_path: Path) -> int:
    from .anomaly import SrConfig, detect_anomalies

    model = _model(cfg, args)
    series, _ = _load_data(cfg, cfg_path, evaluation=True, window=False)
    if len(series) != 1:
        raise UsageError(f"detect expects a single series, got {len(series)}")
    truth = None
    if cfg.data.labels_path:
        lab = load_dataset(_resolve(cfg_path, cfg.data.labels_path))
        truth = lab.values[0, :, 0] > 0.5
        if truth.shape[0] != series.shape[1]:
            raise UsageError("label file length differs from the series")
    t = cfg.task
    pct = args.percentile if args.percentile is not None else t.percentile
    sr = SrConfig(t.q_window, t.n_neighbor, t.z_thresh)
    res = detect_anomalies(model, series, _schedule(cfg), window=t.window, percentile=pct, cfg=sr,
                           n=t.n_samples or 10, truth=truth, passes=t.passes, block=t.block, seed=t.seed)
    out = Path(args.out)
    cols = ["step", "score", "raw", "adjusted"] + (["truth"] if truth is not None else [])
    rows = ([j, float(res.score[j]), int(res.raw_labels[j]), int(res.adjusted_labels[j])]
            + ([int(truth[j])] if truth is not None else []) for j in range(res.score.size))
    _write_rows(out / "labels.csv", cols, rows)
    metrics = {"threshold": res.threshold, "percentile": pct, "n_flagged": int(res.raw_labels.sum())}
    if truth is not None:
        metrics.update(prf1(res.adjusted_labels, truth))
    sweep = t.percentiles or []
    if sweep:
        metrics["sweep"] = []
        for q in sweep:
            r = res.relabel(q, truth)
            row = {"percentile": q, "threshold": r.threshold}
            if truth is not None:
                row.update(prf1(r.adjusted_labels, truth))
            metrics["sweep"].append(row)
    _write_json(out / "metrics.json", metrics)
    msg = f"threshold {res.threshold:.4g} at percentile {pct:g}, {metrics['n_flagged']} points flagged"
    if truth is not None:
        msg += f"; adjusted F1 {metrics['F1']:.3f}"
    print(msg)
    return EXIT_OK


def _load_array(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    if p.suffix == ".npy":
        return np.load(p)
    return load_dataset(p).values


def cmd_eval(cfg: RunConfig, args, cfg_path: Path | None) -> int:
    if not args.pred or not args.truth:
        raise UsageError("eval needs --pred and --truth")
    pred, truth = _load_array(args.pred), _load_array(args.truth)
    mask = _load_array(args.mask).astype(bool) if args.mask else np.ones(truth.shape, bool)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    samples = pred if pred.ndim == truth.ndim + 1 else pred[None]
    if samples.shape[1:] != truth.shape:
        raise UsageError(f"prediction shape {pred.shape} does not align with truth {truth.shape}")
    if mask.shape != truth.shape:
        raise UsageError(f"mask shape {mask.shape} does not align with truth {truth.shape}")
    point = np.median(samples, axis=0)
    out = {}
    pm = metrics_point(truth, point, mask)
    cm = crps(samples, truth, mask) if {"CRPS", "CRPS_sum"} & set(wanted) else {}
    for m in wanted:
        if m in pm:
            out[m] = pm[m]
        elif m in cm:
            out[m] = cm[m]
        else:
            raise UsageError(f"unknown metric {m!r}")
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_physics_demo(cfg: RunConfig, args, cfg_path: Path) -> int:
    from .physics import RefineDiagnostics, langevin_refine, pde_residual
    from .tasks import SampleSet, forecast

    if cfg.physics is None:
        raise ConfigError("physics-demo needs a physics section in the config")
    spec, ecfg = _refine(replace(cfg, physics=replace(cfg.physics, enabled=True)), args)
    model = _model(cfg, args)
    batch, stats = _load_data(cfg, cfg_path, evaluation=True)
    if batch.shape[2] != spec.grid_size:
        raise UsageError(f"data has {batch.shape[2]} spatial points, model K_max is {spec.grid_size}")
    n = cfg.task.n_samples or 4
    res = forecast(model, batch, cfg.task.horizon, _schedule(cfg), n=n, seed=cfg.task.seed)
    raw = torch.as_tensor(res.samples.samples)
    nS, B, L, K = raw.shape
    sp = res.split
    rep = lambda a: torch.as_tensor(np.broadcast_to(a, (nS, *a.shape)).reshape(nS * B, *a.shape[1:]).copy())
    diag = RefineDiagnostics()
    dtype = torch.float32
    refined = langevin_refine(raw.reshape(nS * B, L, K).to(dtype), rep(sp.x_con).to(dtype), rep(sp.con_mask),
                              rep(sp.tar_mask), rep(sp.channel_valid), spec, model, _schedule(cfg), ecfg,
                              torch.Generator().manual_seed(ecfg.seed), diagnostics=diag)
    raw = raw.double().numpy()
    # refinement runs at model precision; only target cells may change
    refined = np.where(sp.tar_mask, refined.reshape(nS, B, L, K).double().numpy(), raw)
    out = Path(args.out)
    diag.to_csv(out / "diagnostics.csv")
    rows, summary = [], {"unrefined": {}, "refined": {}}
    for name, arr in (("unrefined", raw), ("refined", refined)):
        Kval = -pde_residual(torch.as_tensor(arr.reshape(nS * B, L, K)), spec).K.numpy()
        med = SampleSet(arr).median
        mse = metrics_point(batch.values, med, sp.tar_mask)["MSE"]
        summary[name] = {"mean_abs_K": float(Kval.mean()), "median_MSE": mse}
        rows.append(Kval)
        _write_rows(out / f"{name}.csv", ["series", "step", "channel", "value"],
                    _long_rows(denormalize(med, stats), _names(batch)))
    _write_rows(out / "per_sample.csv", ["sample", "abs_K_unrefined", "abs_K_refined"],
                ([i, float(a), float(b)] for i, (a, b) in enumerate(zip(*rows))))
    _write_json(out / "summary.json", summary)
    print(f"mean |K| unrefined {summary['unrefined']['mean_abs_K']:.4g} -> refined "
          f"{summary['refined']['mean_abs_K']:.4g}; MSE {summary['unrefined']['median_MSE']:.4g} -> "
          f"{summary['refined']['median_MSE']:.4g}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "forecast": cmd_forecast,
    "impute": cmd_impute,
    "generate": cmd_generate,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "physics-demo": cmd_physics_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="timedit", description="Conditional diffusion transformer for time series tasks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override training.seed, task.seed and physics.seed")
        p.add_argument("--samples", type=int, help="override task.n_samples")
        p.add_argument("--physics", action="store_true", help="enable Langevin refinement")
        p.add_argument("--percentile", type=float, help="anomaly threshold percentile")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--pred", help="predictions or samples (.npy or CSV)")
            p.add_argument("--truth", help="ground truth (.npy or CSV)")
            p.add_argument("--mask", help="evaluation mask (.npy or CSV)")
            p.add_argument("--metrics", default="MSE,MAE,CRPS", help="comma separated metric names")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.training.seed = args.seed
        cfg.task.seed = args.seed
        if cfg.physics is not None:
            cfg.physics.seed = args.seed
    if args.samples is not None:
        if args.samples < 1:
            raise UsageError("--samples must be >= 1")
        cfg.task.n_samples = args.samples
    if args.percentile is not None and not 0 <= args.percentile <= 100:
        raise UsageError("--percentile must lie in [0, 100]")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("TIMEDIT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg_path = Path(args.config) if args.config else None
        if cfg_path is None and args.command != "eval":
            raise UsageError(f"{args.command} needs --config")
        cfg = load_config(cfg_path) if cfg_path else RunConfig()
        cfg = _apply_overrides(cfg, args)
        if args.command != "eval":
            Path(args.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, cfg_path)
    except FloatingPointError as exc:
        print(f"timedit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DataFormatError, CheckpointError, EmptyTargetError,
            FileNotFoundError, ValueError) as exc:
        print(f"timedit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
