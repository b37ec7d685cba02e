"""Forecasting, imputation and generation as mask choice + sampling + aggregation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .data import TimeSeriesBatch
from .diffusion import QUANTILE_LEVELS, NoiseSchedule, aggregate, ancestral_sample
from .masks import ConditionTargetSplit, TaskMask, block_mask, random_mask, reconstruction_mask, split
from .metrics import metrics_point

DEFAULT_RATIOS = (0.125, 0.25, 0.375, 0.5)


@dataclass
class SampleSet:
    """n completed series of shape (B, L, K), stacked on the leading axis."""

    samples: np.ndarray
    levels: np.ndarray = QUANTILE_LEVELS

    def __post_init__(self):
        s = self.samples
        self.samples = np.asarray(s.detach().cpu().numpy() if isinstance(s, torch.Tensor) else s, dtype=np.float64)
        if self.samples.ndim != 4 or self.samples.shape[0] < 1:
            raise ValueError(f"samples must be (n, B, L, K) with n >= 1, got {self.samples.shape}")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @cached_property
    def _agg(self):
        return aggregate(self.samples, self.levels)

    @property
    def median(self) -> np.ndarray:
        return self._agg.median

    @property
    def quantiles(self) -> np.ndarray:
        """(n_levels, B, L, K) table, nondecreasing along the first axis."""
        return self._agg.quantiles


@dataclass
class TaskResult:
    samples: SampleSet
    split: ConditionTargetSplit
    unrefined: SampleSet | None = None

    @property
    def median(self) -> np.ndarray:
        return self.samples.median


def _generator(generator, seed):
    return generator if generator is not None else torch.Generator().manual_seed(seed)


def _exact_condition(samples: torch.Tensor, sp: ConditionTargetSplit) -> SampleSet:
    """Restore condition cells from the full-precision input (the sampler runs at model precision)."""
    s = samples.detach().cpu().numpy().astype(np.float64)
    return SampleSet(np.where(sp.con_mask, sp.x_con, s))


def run_task(model, sp: ConditionTargetSplit, schedule: NoiseSchedule, n: int, generator=None, seed: int = 0,
             refine=None) -> TaskResult:
    """Sample ``n`` completions of a split, optionally followed by Langevin refinement.

    ``refine`` is a (PdeSpec, EnergyConfig) pair.
    """
    gen = _generator(generator, seed)
    raw = ancestral_sample(model, sp, schedule, n_chains=n, generator=gen)
    if refine is None:
        return TaskResult(_exact_condition(raw, sp), sp)
    from .physics import langevin_refine

    spec, ecfg = refine
    n_, B, L, K = raw.shape
    rep = lambda a: np.broadcast_to(a, (n_, *a.shape)).reshape(n_ * B, *a.shape[1:])
    dtype = raw.dtype
    x_con = torch.as_tensor(rep(sp.x_con), dtype=dtype)
    con = torch.as_tensor(rep(sp.con_mask))
    tar = torch.as_tensor(rep(sp.tar_mask))
    cv = torch.as_tensor(rep(sp.channel_valid))
    rgen = torch.Generator().manual_seed(ecfg.seed)
    refined = langevin_refine(raw.reshape(n_ * B, L, K), x_con, con, tar, cv, spec, model, schedule, ecfg, rgen)
    return TaskResult(_exact_condition(refined.reshape(n_, B, L, K), sp), sp, unrefined=_exact_condition(raw, sp))


def forecast(model, batch: TimeSeriesBatch, horizon: int, schedule: NoiseSchedule, n: int = 30,
             generator=None, seed: int = 0, refine=None) -> TaskResult:
    """Predict the final ``horizon`` steps of every window from the observed history before them."""
    B, L, K = batch.shape
    if not 1 <= horizon <= L - 1:
        raise ValueError(f"horizon must lie in [1, {L - 1}], got {horizon}")
    sp = split(batch, block_mask(batch.shape, horizon))
    if not sp.con_mask.reshape(B, -1).any(axis=1).all():
        raise ValueError("empty history: some series have no observed cell before the horizon")
    return run_task(model, sp, schedule, n, generator, seed, refine)


def impute(model, batch: TimeSeriesBatch, target_mask: TaskMask | np.ndarray, schedule: NoiseSchedule,
           n: int = 10, generator=None, seed: int = 0, refine=None) -> TaskResult:
    """Fill cells where ``target_mask`` is 0 (observed cells only enter the target set)."""
    sp = split(batch, target_mask)
    return run_task(model, sp, schedule, n, generator, seed, refine)


def impute_sweep(model, batch: TimeSeriesBatch, schedule: NoiseSchedule, ratios=DEFAULT_RATIOS, n: int = 10,
                 seed: int = 0) -> dict:
    """Random-mask imputation at each ratio; reports per-ratio and averaged MSE/MAE on target cells."""
    rng = np.random.default_rng(seed)
    per = {}
    for i, r in enumerate(ratios):
        res = impute(model, batch, random_mask(batch.shape, r, rng), schedule, n, seed=seed + i)
        m = metrics_point(batch.values, res.median, res.split.tar_mask)
        per[f"{r:g}"] = {"MSE": m["MSE"], "MAE": m["MAE"]}
    avg = {k: float(np.mean([v[k] for v in per.values()])) for k in ("MSE", "MAE")}
    return {"per_ratio": per, "average": avg}


def generate(model, shape: tuple[int, int, int], schedule: NoiseSchedule, n: int = 1, generator=None,
             seed: int = 0) -> SampleSet:
    """Unconditional synthesis: every cell is a target."""
    B, L, K = shape
    empty = TimeSeriesBatch(np.zeros(shape), np.ones(shape, dtype=bool))
    sp = split(empty, reconstruction_mask(shape))
    return SampleSet(ancestral_sample(model, sp, schedule, n_chains=n, generator=_generator(generator, seed)))
