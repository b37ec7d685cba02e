"""Dense tensor substrate.

Tensors are ``torch.Tensor`` values and the autograd graph plays the role of the
gradient tape.  This module pins down the handful of primitives the denoiser is
built from (matrix product, layer norm, masked attention) together with the
checks the rest of the package relies on: finiteness, degenerate attention
masks, and finite-difference gradient verification.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """A substrate operation produced NaN or Inf."""


class DegenerateMaskError(ValueError):
    """Every key position of some attention row is masked."""


class DetachedGraphError(RuntimeError):
    """The loss does not depend on anything that requires a gradient."""


def set_precision(bits: int) -> torch.dtype:
    """Switch the build-wide float precision (32 or 64 bit)."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    dtype = torch.float64 if bits == 64 else torch.float32
    torch.set_default_dtype(dtype)
    return dtype


def default_dtype() -> torch.dtype:
    return torch.get_default_dtype()


if os.environ.get("TIMEDIT_FLOAT64", "") not in ("", "0"):
    set_precision(64)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def layer_norm(h: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalise the last axis to zero mean and unit (population) variance."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = h.mean(dim=-1, keepdim=True)
    centred = h - mean
    var = (centred * centred).mean(dim=-1, keepdim=True)
    return centred / torch.sqrt(var + eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def softmax_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    attn_mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention.

    ``attn_mask`` is boolean and broadcastable to ``(..., Lq, Lk)``; True marks a
    key position the query may not attend to.  Masked positions get exactly zero
    weight.  A query row with every key masked raises ``DegenerateMaskError``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key head dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values must have the same length")
    scores = matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if attn_mask is not None:
        attn_mask = attn_mask.to(torch.bool)
        blocked = torch.broadcast_to(attn_mask, scores.shape)
        if blocked.all(dim=-1).any():
            raise DegenerateMaskError("attention row with every key position masked")
        scores = scores.masked_fill(blocked, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def backward(
    loss: torch.Tensor,
    params: Sequence[torch.Tensor] | Mapping[str, torch.Tensor],
) -> list[torch.Tensor] | dict[str, torch.Tensor]:
    """Gradient of a scalar loss with respect to ``params``.

    Parameters that did not take part in the forward pass get zero gradients.
    The graph is retained so callers can differentiate the same loss again.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise DetachedGraphError("loss is not attached to any tensor requiring grad")
    names = None
    if isinstance(params, Mapping):
        names = list(params.keys())
        tensors = list(params.values())
    else:
        tensors = list(params)
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True, retain_graph=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    for g in grads:
        check_finite(g, "gradient")
    if names is not None:
        return dict(zip(names, grads))
    return grads


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    n_checked: int
    analytic: torch.Tensor
    numeric: torch.Tensor

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
                f"over {self.n_checked} coords (worst at {self.worst_index})")


def relative_errors(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-3) -> torch.Tensor:
    """Per-coordinate |a - n| / max(|a|, |n|, floor * max|n|).

    The floor keeps coordinates whose true gradient is many orders of magnitude
    below the largest one from being judged on rounding noise alone.
    """
    a = analytic.double().reshape(-1)
    n = numeric.double().reshape(-1)
    scale = max(float(n.abs().max()), float(a.abs().max()), 1e-30)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(n, floor * scale))
    return (a - n).abs() / denom


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float | None = None,
    tol: float | None = None,
    coords: Sequence[int] | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The tape gradient is taken at ``x``'s own precision.  The finite-difference
    reference is always evaluated in float64, so ``f`` must accept a float64
    argument.  ``coords`` restricts the comparison to a subset of flat indices.
    """
    is64 = x.dtype == torch.float64
    if step is None:
        step = 1e-6 if is64 else 1e-4
    if tol is None:
        tol = 1e-6 if is64 else 1e-3
    xg = x.detach().clone().requires_grad_(True)
    (analytic,) = backward(f(xg), [xg])
    analytic = analytic.detach().reshape(-1)

    base = x.detach().double().reshape(-1)
    idx = range(base.numel()) if coords is None else list(coords)
    idx = list(idx)
    numeric = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx):
            plus = base.clone()
            plus[i] += step
            minus = base.clone()
            minus[i] -= step
            fp = f(plus.reshape(x.shape))
            fm = f(minus.reshape(x.shape))
            numeric[j] = (fp.double() - fm.double()).reshape(()) / (2 * step)
    a = analytic[idx]
    rel = relative_errors(a, numeric, floor)
    worst = int(torch.argmax(rel)) if len(idx) else 0
    max_rel = float(rel.max()) if len(idx) else 0.0
    return GradCheckReport(
        passed=max_rel < tol,
        max_rel_error=max_rel,
        worst_index=idx[worst] if idx else -1,
        n_checked=len(idx),
        analytic=a,
        numeric=numeric,
    )
