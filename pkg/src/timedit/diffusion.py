"""Noise schedule, forward corruption, the masked epsilon loss and ancestral sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .masks import ConditionTargetSplit, EmptyTargetError
from .nn import NonFiniteError, default_dtype

# 19 quantile levels 0.05, 0.10, ..., 0.95
QUANTILE_LEVELS = np.round(np.arange(1, 20) * 0.05, 2)

# Denoiser call signature shared by the network and test oracles:
#   eps_hat = model(x_t, t, x_con, con_mask, tar_mask, channel_valid)
Denoiser = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def at(self, t, name: str = "alpha_bar", dtype=None) -> torch.Tensor:
        """Look up a schedule table at 1-based steps ``t`` as a torch tensor."""
        table = getattr(self, name)
        idx = torch.as_tensor(t, dtype=torch.long) - 1
        return torch.as_tensor(table, dtype=dtype or default_dtype())[idx]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of 1 - beta."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def desk_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule with the endpoints rescaled by 1000/T so alpha_bar_T stays near zero."""
    scale = 1000.0 / T
    return make_schedule(T, min(1e-4 * scale, 0.5), min(0.02 * scale, 0.5))


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        if dtype is None and x.is_floating_point():
            return x
        return x.to(dtype or default_dtype())
    return torch.as_tensor(np.asarray(x), dtype=dtype or default_dtype())


@dataclass
class DiffusionSample:
    x_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor


def forward_sample(x0, tar_mask, t, schedule: NoiseSchedule, generator: torch.Generator | None = None,
                   eps: torch.Tensor | None = None) -> DiffusionSample:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps on target cells; other cells keep x0."""
    x0 = _as_tensor(x0)
    tar = _as_tensor(tar_mask, torch.bool)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1 and x0.shape[0] != 1:
        t = t.expand(x0.shape[0])
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"diffusion step outside [1, {schedule.T}]")
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    eps = torch.where(tar, eps, torch.zeros_like(eps))
    ab = schedule.at(t, dtype=x0.dtype).reshape(-1, *([1] * (x0.dim() - 1)))
    noised = torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps
    return DiffusionSample(torch.where(tar, noised, x0), t, eps)


def _split_tensors(split: ConditionTargetSplit, dtype=None):
    dtype = dtype or default_dtype()
    return (
        _as_tensor(split.x_con, dtype),
        _as_tensor(split.x_tar, dtype),
        _as_tensor(split.con_mask, torch.bool),
        _as_tensor(split.tar_mask, torch.bool),
        _as_tensor(split.channel_valid, torch.bool),
    )


def training_loss(model: Denoiser, split: ConditionTargetSplit, schedule: NoiseSchedule,
                  generator: torch.Generator | None = None, t=None) -> torch.Tensor:
    """Mean squared epsilon error over target cells, t uniform per batch element."""
    x_con, x_tar, con, tar, cv = _split_tensors(split)
    n_tar = tar.sum()
    if n_tar == 0:
        raise EmptyTargetError("training_loss needs at least one target cell")
    B = x_con.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    x0 = x_con + x_tar
    sample = forward_sample(x0, tar, t, schedule, generator)
    eps_hat = model(sample.x_t, sample.t, x_con, con, tar, cv)
    diff = torch.where(tar, eps_hat - sample.eps, torch.zeros_like(eps_hat))
    return (diff * diff).sum() / n_tar


def _model_limits(model, L: int, K: int) -> tuple[int, int]:
    cfg = getattr(model, "config", None)
    if cfg is None:
        return L, K
    return max(L, cfg.L_max), max(K, cfg.K_max)


def draw_noise(generator: torch.Generator | None, shape, limits: tuple[int, int], dtype=None) -> torch.Tensor:
    """Standard normal draws aligned to the end of the time axis and the start of the channel axis.

    Drawing at the model's full (L_max, K_max) footprint and slicing keeps the
    noise a given real cell sees identical whether or not the batch was padded.
    """
    *lead, L, K = shape
    L_max, K_max = limits
    z = torch.randn(*lead, L_max, K_max, generator=generator, dtype=dtype or default_dtype())
    return z[..., L_max - L:, :K]


@torch.no_grad()
def ancestral_sample(model: Denoiser, split: ConditionTargetSplit, schedule: NoiseSchedule, n_chains: int = 1,
                     generator: torch.Generator | None = None, x_T: torch.Tensor | None = None,
                     callback=None) -> torch.Tensor:
    """Run the reverse chain on target cells; returns completed series of shape (n, B, L, K).

    Condition cells are re-imposed after every step and invalid channels are
    zeroed, so both are bit-identical to the input in the output.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    x_con, _, con, tar, cv = _split_tensors(split)
    B, L, K = x_con.shape
    rep = lambda a: a.unsqueeze(0).expand(n_chains, *a.shape).reshape(n_chains * B, *a.shape[1:])
    x_con, con, tar, cv = rep(x_con), rep(con), rep(tar), rep(cv)
    valid = cv[:, None, :].expand_as(tar)
    limits = _model_limits(model, L, K)
    if x_T is None:
        x_T = draw_noise(generator, (n_chains * B, L, K), limits)
    else:
        x_T = x_T.reshape(n_chains * B, L, K).to(x_con.dtype)
    zero = torch.zeros_like(x_con)

    def clamp(x):
        x = torch.where(tar, x, x_con)
        return torch.where(valid, x, zero)

    x = clamp(x_T)
    for t in range(schedule.T, 0, -1):
        a = float(schedule.alpha[t - 1])
        ab = float(schedule.alpha_bar[t - 1])
        tt = torch.full((n_chains * B,), t, dtype=torch.long)
        eps_hat = model(x, tt, x_con, con, tar, cv)
        mean = (x - (1 - a) / np.sqrt(1 - ab) * eps_hat) / np.sqrt(a)
        if t > 1:
            z = draw_noise(generator, x.shape, limits, x.dtype)
            x = mean + np.sqrt(schedule.beta[t - 1]) * z
        else:
            x = mean
        x = clamp(x)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite sampler state at step {t}")
        if callback is not None:
            callback(t, x)
    return x.reshape(n_chains, B, L, K)


@dataclass
class Aggregate:
    median: np.ndarray
    quantiles: np.ndarray
    levels: np.ndarray


def aggregate(samples, levels=QUANTILE_LEVELS) -> Aggregate:
    """Per-cell median and empirical quantiles over the leading sample axis."""
    s = samples.detach().cpu().numpy() if isinstance(samples, torch.Tensor) else np.asarray(samples)
    if s.shape[0] < 1:
        raise ValueError("need at least one sample")
    s = s.astype(np.float64)
    return Aggregate(np.median(s, axis=0), np.quantile(s, levels, axis=0), np.asarray(levels))
