"""PDE residual energies, likelihood gradients and Langevin refinement of samples."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import nn as tnn
from .diffusion import NoiseSchedule, draw_noise
from .pde import PdeSpec

logger = logging.getLogger(__name__)


class RefinementDivergence(FloatingPointError):
    pass


@dataclass
class EnergyConfig:
    alpha: float = 1.0
    step: float = 1e-3
    iters: int = 50
    logp_mc_samples: int = 4
    t_band: str = "low"
    seed: int = 0
    max_norm_ratio: float = 1e3

    def __post_init__(self):
        if self.alpha < 0 or self.step <= 0 or self.iters < 0 or self.logp_mc_samples < 1:
            raise ValueError("need alpha >= 0, step > 0, iters >= 0, logp_mc_samples >= 1")
        if self.t_band not in ("low", "full"):
            raise ValueError("t_band must be 'low' or 'full'")


@dataclass
class ResidualField:
    sq: torch.Tensor
    K: torch.Tensor


# ---------------------------------------------------------------- residual (autodiff route)

def _check_grid(x, spec: PdeSpec):
    if x.shape[-1] != spec.grid_size:
        raise ValueError(f"trajectory has {x.shape[-1]} spatial points, spec expects {spec.grid_size}")
    if x.shape[-2] < 3:
        raise ValueError("trajectory needs at least 3 time steps")


def pde_residual(x, spec: PdeSpec) -> ResidualField:
    """Squared residual of dx/dt - F(x) on a (..., L, N) trajectory.

    Time derivative: forward differences (backward at the last frame).
    Space derivatives: periodic central differences.  K = -sum of squares per trajectory.
    """
    x = torch.as_tensor(x)
    _check_grid(x, spec)
    dx, dt, c = spec.dx, spec.dt, spec.coeffs
    d = (x[..., 1:, :] - x[..., :-1, :]) / dt
    xt = torch.cat([d, d[..., -1:, :]], dim=-2)
    up, down = torch.roll(x, -1, dims=-1), torch.roll(x, 1, dims=-1)
    grad = (up - down) / (2 * dx)
    lap = (up - 2 * x + down) / dx ** 2
    if spec.family == "advection":
        F = -c["c"] * grad
    elif spec.family == "burgers":
        F = -x * grad + c["nu"] * lap
    else:
        F = c["D"] * lap - c["k"] * x
    r = xt - F
    sq = r * r
    return ResidualField(sq, -sq.sum(dim=(-2, -1)))


def residual_gradient_autodiff(x, spec: PdeSpec) -> torch.Tensor:
    xg = torch.as_tensor(x).detach().clone().requires_grad_(True)
    (g,) = tnn.backward(pde_residual(xg, spec).K.sum(), [xg])
    return g


# ---------------------------------------------------------------- residual (adjoint route)

def _central(u, dx):
    return (np.roll(u, -1, axis=-1) - np.roll(u, 1, axis=-1)) / (2 * dx)


def _lap(u, dx):
    return (np.roll(u, -1, axis=-1) - 2 * u + np.roll(u, 1, axis=-1)) / dx ** 2


def residual_gradient(x, spec: PdeSpec) -> np.ndarray:
    """dK/dx assembled from the transposed finite-difference stencils (no autodiff)."""
    x = np.asarray(x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x, dtype=np.float64)
    _check_grid(x, spec)
    dx, dt, c = spec.dx, spec.dt, spec.coeffs
    L = x.shape[-2]
    xt = np.empty_like(x)
    xt[..., :-1, :] = (x[..., 1:, :] - x[..., :-1, :]) / dt
    xt[..., -1, :] = xt[..., -2, :]
    if spec.family == "advection":
        r = xt + c["c"] * _central(x, dx)
        jt_r = c["c"] * _central(r, dx)
    elif spec.family == "burgers":
        gx = _central(x, dx)
        r = xt + x * gx - c["nu"] * _lap(x, dx)
        jt_r = -gx * r + _central(x * r, dx) + c["nu"] * _lap(r, dx)
    else:
        r = xt - c["D"] * _lap(x, dx) + c["k"] * x
        jt_r = c["D"] * _lap(r, dx) - c["k"] * r
    dt_r = np.zeros_like(x)
    dt_r[..., 1:, :] += r[..., :-1, :] / dt
    dt_r[..., :-1, :] -= r[..., :-1, :] / dt
    dt_r[..., L - 1, :] += r[..., -1, :] / dt
    dt_r[..., L - 2, :] -= r[..., -1, :] / dt
    return -2.0 * (dt_r - jt_r)


# ---------------------------------------------------------------- likelihood gradient

def logp_gradient(model, x, x_con, con_mask, tar_mask, channel_valid, schedule: NoiseSchedule,
                  config: EnergyConfig, generator: torch.Generator | None = None) -> torch.Tensor:
    """Monte-Carlo estimate of grad_x of -E_{t,eps} ||eps_theta(x_t, t; x_con) - eps||^2 on target cells.

    Each leading batch element is treated as an independent sample.
    """
    x = torch.as_tensor(x).detach()
    tar = torch.as_tensor(tar_mask, dtype=torch.bool)
    con = torch.as_tensor(con_mask, dtype=torch.bool)
    x_con = torch.as_tensor(x_con, dtype=x.dtype)
    B = x.shape[0]
    hi = max(1, schedule.T // 10) if config.t_band == "low" else schedule.T
    xg = x.clone().requires_grad_(True)
    total = xg.new_zeros(())
    for _ in range(config.logp_mc_samples):
        t = torch.randint(1, hi + 1, (B,), generator=generator)
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        eps = torch.where(tar, eps, torch.zeros_like(eps))
        ab = schedule.at(t, dtype=x.dtype).reshape(-1, *([1] * (x.dim() - 1)))
        x_t = torch.where(tar, torch.sqrt(ab) * xg + torch.sqrt(1 - ab) * eps, x_con)
        eps_hat = model(x_t, t, x_con, con, tar, channel_valid)
        err = torch.where(tar, eps_hat - eps, torch.zeros_like(eps))
        total = total + (err * err).sum()
    (g,) = tnn.backward(-total / config.logp_mc_samples, [xg])
    return torch.where(tar, g, torch.zeros_like(g)).detach()


# ---------------------------------------------------------------- Langevin

@dataclass
class RefineDiagnostics:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        import csv

        cols = ["sample", "iteration", "K", "grad_K_norm", "grad_logp_norm"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row[k] for k in cols})


def langevin(x0: torch.Tensor, grad_fn: Callable[[torch.Tensor], torch.Tensor], step: float, iters: int,
             update_mask: torch.Tensor | None = None, generator: torch.Generator | None = None,
             max_norm_ratio: float = 1e3, noise_fn=None) -> torch.Tensor:
    """x <- x + step * grad_fn(x) + sqrt(2 step) * N(0, 1) on cells where ``update_mask`` holds."""
    x = x0.detach().clone()
    mask = torch.ones_like(x, dtype=torch.bool) if update_mask is None else update_mask
    start = float(x0.norm()) + 1.0
    for j in range(iters):
        z = noise_fn(x.shape) if noise_fn else torch.randn(x.shape, generator=generator, dtype=x.dtype)
        x = torch.where(mask, x + step * grad_fn(x) + math.sqrt(2 * step) * z, x)
        if not torch.isfinite(x).all() or float(x.norm()) > max_norm_ratio * start:
            raise RefinementDivergence(f"Langevin chain diverged at iteration {j}: |x| = {float(x.norm()):.3g}")
    return x


def langevin_refine(x_tar0, x_con, con_mask, tar_mask, channel_valid, spec: PdeSpec, model,
                    schedule: NoiseSchedule, config: EnergyConfig, generator: torch.Generator | None = None,
                    diagnostics: RefineDiagnostics | None = None, energy_grad=None) -> torch.Tensor:
    """Refine completed samples (N, L, K) with Langevin steps on K + alpha * log p.

    Only target cells move; condition cells and invalid channels are untouched.
    ``energy_grad`` replaces the PDE residual gradient (used for analytic tests).
    """
    x0 = torch.as_tensor(x_tar0).detach()
    if config.iters == 0:
        return x0.clone()
    tar = torch.as_tensor(tar_mask, dtype=torch.bool)
    if channel_valid is not None:
        tar = tar & torch.as_tensor(channel_valid, dtype=torch.bool)[:, None, :]
    gen = generator or torch.Generator().manual_seed(config.seed)
    limits = (model.config.L_max, model.config.K_max) if hasattr(model, "config") else x0.shape[-2:]
    state = {"j": 0}

    def grad_fn(x):
        if energy_grad is not None:
            gk = energy_grad(x)
        else:
            gk = torch.as_tensor(residual_gradient(x, spec), dtype=x.dtype)
        gk = torch.where(tar, gk, torch.zeros_like(gk))
        g = gk
        gl = None
        if config.alpha > 0 and model is not None:
            gl = logp_gradient(model, x, x_con, con_mask, tar, channel_valid, schedule, config, gen)
            g = gk + config.alpha * gl
        if diagnostics is not None:
            K = pde_residual(x.double(), spec).K if energy_grad is None else torch.full((x.shape[0],), float("nan"))
            for i in range(x.shape[0]):
                diagnostics.rows.append({
                    "sample": i, "iteration": state["j"], "K": float(K[i]),
                    "grad_K_norm": float(gk[i].norm()),
                    "grad_logp_norm": float(gl[i].norm()) if gl is not None else 0.0,
                })
        state["j"] += 1
        return g

    noise_fn = lambda shape: draw_noise(gen, shape, limits, x0.dtype)
    return langevin(x0, grad_fn, config.step, config.iters, tar, gen, config.max_norm_ratio, noise_fn)


# ---------------------------------------------------------------- Boltzmann optimum

def regularized_objective(q: np.ndarray, p: np.ndarray, K: np.ndarray, alpha: float) -> np.ndarray:
    """E_q[K] - alpha * KL(q || p) along the last axis."""
    return (q * K).sum(-1) - alpha * (q * (np.log(q) - np.log(p))).sum(-1)


def free_energy_objective(q: np.ndarray, p: np.ndarray, K: np.ndarray, alpha: float) -> np.ndarray:
    """E_q[K + alpha log p] + H(q); the Boltzmann law of that energy maximises it."""
    return (q * (K + alpha * np.log(p))).sum(-1) - (q * np.log(q)).sum(-1)


def boltzmann(p: np.ndarray, K: np.ndarray, alpha: float) -> np.ndarray:
    """q proportional to exp(K + alpha log p) = p**alpha * exp(K)."""
    logits = K + alpha * np.log(p)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def tilted(p: np.ndarray, K: np.ndarray, alpha: float) -> np.ndarray:
    """q proportional to p * exp(K / alpha), the stationary point of the KL-regularised objective."""
    logits = K / alpha + np.log(p)
    w = np.exp(logits - logits.max())
    return w / w.sum()


@dataclass
class BoltzmannReport:
    attains_max: bool
    objective_at_q: float
    best_perturbed: float
    n_perturbations: int
    n_beating: int
    q: np.ndarray
    tilted_attains_max: bool
    free_energy_attains_max: bool


def _perturbations(q: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    half = n // 2
    scales = 10 ** rng.uniform(-4, 0, size=(half, 1))
    local = q * np.exp(scales * rng.standard_normal((half, q.size)))
    local /= local.sum(-1, keepdims=True)
    far = rng.dirichlet(np.ones(q.size), size=n - half)
    return np.clip(np.concatenate([local, far]), 1e-300, None)


def verify_boltzmann_optimum(p, K, alpha: float, n_perturb: int = 10_000, rng: np.random.Generator | None = None,
                             tol: float = 1e-12) -> BoltzmannReport:
    """Check q* = p**alpha exp(K) / Z against random perturbations on the KL-regularised objective.

    Also reports whether p exp(K/alpha) / Z wins the same contest and whether q*
    wins the free-energy form, which separates the two ways alpha can enter.
    """
    p = np.asarray(p, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if (p <= 0).any():
        raise ValueError("p must be strictly positive")
    p = p / p.sum()
    rng = rng or np.random.default_rng(0)
    q = boltzmann(p, K, alpha)
    cands = _perturbations(q, n_perturb, rng)
    at_q = float(regularized_objective(q, p, K, alpha))
    scores = regularized_objective(cands, p, K, alpha)
    n_beating = int((scores > at_q + tol).sum())

    qt = tilted(p, K, alpha)
    cands_t = _perturbations(qt, n_perturb, rng)
    tilted_ok = bool((regularized_objective(cands_t, p, K, alpha) <= regularized_objective(qt, p, K, alpha) + tol).all())
    fe_ok = bool((free_energy_objective(cands, p, K, alpha) <= free_energy_objective(q, p, K, alpha) + tol).all())
    return BoltzmannReport(n_beating == 0, at_q, float(scores.max()), n_perturb, n_beating, q, tilted_ok, fe_ok)
