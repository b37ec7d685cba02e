"""Spectral-residual saliency and reconstruction-based anomaly detection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import TimeSeriesBatch, windows
from .diffusion import NoiseSchedule, ancestral_sample
from .masks import split, stride_mask
from .metrics import point_adjust

EPS = 1e-8


@dataclass(frozen=True)
class SrConfig:
    q_window: int = 3
    n_neighbor: int = 2
    z_thresh: float = 3.0

    def __post_init__(self):
        if self.q_window < 1 or self.n_neighbor < 0:
            raise ValueError("need q_window >= 1 and n_neighbor >= 0")


def _trailing_mean(v: np.ndarray, q: int) -> np.ndarray:
    """Average of the last q entries (fewer at the start)."""
    c = np.cumsum(v)
    out = c.copy()
    out[q:] = c[q:] - c[:-q]
    counts = np.minimum(np.arange(1, v.size + 1), q)
    return out / counts


def sr_transform(series, cfg: SrConfig = SrConfig()) -> np.ndarray:
    """Saliency map |IFFT(exp(R + iP))| with R the log amplitude minus its moving average.

    Bins whose amplitude falls below the epsilon floor are dropped from the
    reconstruction rather than amplified.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("sr_transform expects a non-empty 1-D series")
    if x.size < cfg.q_window:
        raise ValueError(f"series of length {x.size} shorter than q_window {cfg.q_window}")
    spec = np.fft.fft(x)
    amp = np.abs(spec)
    dead = amp <= EPS
    log_amp = np.log(np.maximum(amp, EPS))
    log_amp[dead] = 0.0
    resid = log_amp - _trailing_mean(log_amp, cfg.q_window)
    phase = np.exp(1j * np.angle(spec))
    out = np.exp(resid) * phase
    out[dead] = 0.0
    return np.abs(np.fft.ifft(out))


def sr_flags(series, cfg: SrConfig = SrConfig()) -> np.ndarray:
    """Points whose saliency sits ``z_thresh`` standard deviations above the mean, plus neighbours."""
    s = sr_transform(series, cfg)
    sd = s.std()
    hit = s > s.mean() + cfg.z_thresh * sd if sd > 0 else np.zeros(s.shape, bool)
    if cfg.n_neighbor:
        idx = np.flatnonzero(hit)
        for d in range(1, cfg.n_neighbor + 1):
            hit[np.clip(idx - d, 0, s.size - 1)] = True
            hit[np.clip(idx + d, 0, s.size - 1)] = True
    return hit


@dataclass
class AnomalyResult:
    score: np.ndarray
    threshold: float
    raw_labels: np.ndarray
    adjusted_labels: np.ndarray
    percentile: float
    concealed: np.ndarray

    def relabel(self, percentile: float, truth=None) -> "AnomalyResult":
        thr = float(np.percentile(self.score, percentile))
        raw = self.score > thr
        adj = point_adjust(raw, truth) if truth is not None else raw.copy()
        return AnomalyResult(self.score, thr, raw, adj, percentile, self.concealed)


def _window_starts(total: int, window: int) -> list[int]:
    starts = list(range(0, total - window + 1, window))
    if starts[-1] + window < total:
        starts.append(total - window)
    return starts


def reconstruct(model, batch: TimeSeriesBatch, schedule: NoiseSchedule, cfg: SrConfig = SrConfig(),
                n: int = 10, passes: int = 2, block: int = 2, generator=None, seed: int = 0):
    """Median reconstruction of every cell from the cells around it.

    Each pass hides one phase of an interleaved block pattern; together the
    passes hide every time step once.  SR-flagged points are hidden in every
    pass so they never serve as context.  Returns (recon, concealed).
    """
    B, L, K = batch.shape
    gen = generator if generator is not None else torch.Generator().manual_seed(seed)
    usable = batch.obs_mask & batch.channel_valid[:, None, :]
    concealed = np.zeros((B, L, K), dtype=bool)
    for b in range(B):
        for k in range(K):
            if batch.channel_valid[b, k]:
                concealed[b, :, k] = sr_flags(batch.values[b, :, k], cfg)
    phase = (np.arange(L) // block) % passes
    acc = np.zeros((B, L, K))
    cnt = np.zeros((B, L, K))
    for p in range(passes):
        hide = np.broadcast_to((phase == p)[None, :, None], (B, L, K)) | concealed
        sp = split(batch, ~hide, allow_empty=True)
        if not sp.tar_mask.any():
            continue
        med = np.median(ancestral_sample(model, sp, schedule, n_chains=n, generator=gen).numpy(), axis=0)
        acc += np.where(sp.tar_mask, med, 0.0)
        cnt += sp.tar_mask
    recon = np.where(cnt > 0, acc / np.maximum(cnt, 1), batch.values)
    return np.where(usable, recon, 0.0), concealed


def detect_anomalies(model, series: TimeSeriesBatch, schedule: NoiseSchedule, window: int = 100,
                     percentile: float = 99.0, cfg: SrConfig = SrConfig(), n: int = 10, truth=None,
                     passes: int = 2, block: int = 2, seed: int = 0) -> AnomalyResult:
    """Score each time step of one long series by its reconstruction error and threshold at a percentile."""
    if len(series) != 1:
        raise ValueError("detect_anomalies scores one series at a time")
    total = series.shape[1]
    if window > total:
        raise ValueError(f"window {window} longer than series {total}")
    starts = _window_starts(total, window)
    wins = windows(series, window, stride=window)
    if len(starts) > len(wins):
        wins = TimeSeriesBatch(
            np.concatenate([wins.values, series.values[:, -window:]]),
            np.concatenate([wins.obs_mask, series.obs_mask[:, -window:]]),
            np.concatenate([wins.channel_valid, series.channel_valid]),
        )
    recon, concealed = reconstruct(model, wins, schedule, cfg, n, passes, block, seed=seed)
    usable = wins.obs_mask & wins.channel_valid[:, None, :]
    err = np.where(usable, (recon - wins.values) ** 2, 0.0).sum(-1) / np.maximum(usable.sum(-1), 1)
    score = np.zeros(total)
    hidden = np.zeros(total, dtype=bool)
    for i, s in enumerate(starts):
        score[s:s + window] = err[i]
        hidden[s:s + window] = concealed[i].any(-1)
    thr = float(np.percentile(score, percentile))
    raw = score > thr
    adj = point_adjust(raw, np.asarray(truth, bool)) if truth is not None else raw.copy()
    return AnomalyResult(score, thr, raw, adj, percentile, hidden)
