"""Point, probabilistic and detection metrics."""
from __future__ import annotations

import numpy as np

from .diffusion import QUANTILE_LEVELS


def _np(a):
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def metrics_point(y, yhat, mask=None) -> dict:
    """MSE, MAE and RMSE over cells where ``mask`` holds."""
    y, yhat = _np(y).astype(np.float64), _np(yhat).astype(np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    m = np.ones(y.shape, bool) if mask is None else _np(mask).astype(bool)
    if not m.any():
        raise ValueError("empty evaluation mask")
    d = (yhat - y)[m]
    mse = float(np.mean(d * d))
    return {"MSE": mse, "MAE": float(np.mean(np.abs(d))), "RMSE": float(np.sqrt(mse))}


def quantile_loss(q, z, alpha):
    return (alpha - (z < q)) * (z - q)


def _crps_cells(samples, y, levels):
    """Per-cell CRPS estimate: average over levels of twice the pinball loss."""
    qs = np.quantile(samples, levels, axis=0)
    lv = np.asarray(levels).reshape(-1, *([1] * y.ndim))
    return (2 * quantile_loss(qs, y[None], lv)).mean(axis=0)


def crps(samples, y, mask=None, levels=QUANTILE_LEVELS) -> dict:
    """Normalised CRPS and CRPS_sum for samples (n, ..., L, K) against y (..., L, K).

    Both are divided by the summed absolute target value over the masked cells.
    CRPS_sum scores the channel-summed series at every time step with a masked cell.
    """
    s = _np(samples).astype(np.float64)
    y = _np(y).astype(np.float64)
    if s.shape[1:] != y.shape:
        raise ValueError(f"samples {s.shape} do not match target {y.shape}")
    m = np.ones(y.shape, bool) if mask is None else _np(mask).astype(bool)
    if not m.any():
        raise ValueError("empty evaluation mask")
    denom = np.abs(y[m]).sum()
    if denom == 0:
        raise ValueError("target is identically zero; normalised CRPS undefined")
    per_cell = _crps_cells(s, y, levels)
    s_sum = (s * m).sum(-1)
    y_sum = (y * m).sum(-1)
    step = m.any(-1)
    per_step = _crps_cells(s_sum, y_sum, levels)
    return {"CRPS": float(per_cell[m].sum() / denom), "CRPS_sum": float(per_step[step].sum() / denom)}


def point_adjust(raw, truth) -> np.ndarray:
    """Flag a whole true anomaly segment when any point in it is flagged."""
    raw = _np(raw).astype(bool).copy()
    truth = _np(truth).astype(bool)
    if raw.shape != truth.shape or raw.ndim != 1:
        raise ValueError("point_adjust expects two 1-D label arrays of equal length")
    out = raw.copy()
    edges = np.diff(np.concatenate([[0], truth.astype(np.int8), [0]]))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    for a, b in zip(starts, ends):
        if raw[a:b].any():
            out[a:b] = True
    return out


def prf1(pred, truth) -> dict:
    """Precision, recall and F1; zero denominators give 0 and set ``degenerate``."""
    pred = _np(pred).astype(bool)
    truth = _np(truth).astype(bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    degenerate = tp + fp == 0 or tp + fn == 0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": p, "recall": r, "F1": f, "degenerate": degenerate}
