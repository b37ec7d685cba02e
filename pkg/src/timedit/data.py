"""Series containers, loaders, normalisation and shape alignment."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    pass


@dataclass
class TimeSeriesBatch:
    """A batch of multivariate series laid out as (B, L, K).

    ``obs_mask`` is 1 where a value was measured.  ``channel_valid`` is 0 for
    padding channels.  Unobserved cells always hold placeholder zeros.
    """

    values: np.ndarray
    obs_mask: np.ndarray
    channel_valid: np.ndarray | None = None
    time_index: np.ndarray | None = None
    channel_names: list[str] | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise DataFormatError(f"values must be (B, L, K), got shape {values.shape}")
        B, L, K = values.shape
        obs = np.asarray(self.obs_mask).astype(bool)
        if obs.shape != values.shape:
            raise DataFormatError(f"obs_mask shape {obs.shape} != values shape {values.shape}")
        if self.channel_valid is None:
            cv = np.ones((B, K), dtype=bool)
        else:
            cv = np.asarray(self.channel_valid).astype(bool)
            if cv.shape != (B, K):
                raise DataFormatError(f"channel_valid must be {(B, K)}, got {cv.shape}")
        obs = obs & cv[:, None, :]
        if self.time_index is None:
            ti = np.broadcast_to(np.arange(L, dtype=np.float64), (B, L)).copy()
        else:
            ti = np.asarray(self.time_index, dtype=np.float64)
            if ti.shape != (B, L):
                raise DataFormatError(f"time_index must be {(B, L)}, got {ti.shape}")
        self.values = np.where(obs, values, 0.0)
        self.obs_mask = obs
        self.channel_valid = cv
        self.time_index = ti

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __len__(self) -> int:
        return self.values.shape[0]

    def select(self, idx) -> "TimeSeriesBatch":
        idx = np.atleast_1d(np.asarray(idx))
        return TimeSeriesBatch(self.values[idx], self.obs_mask[idx], self.channel_valid[idx],
                               self.time_index[idx], self.channel_names)


def concat(batches: Sequence[TimeSeriesBatch]) -> TimeSeriesBatch:
    return TimeSeriesBatch(
        np.concatenate([b.values for b in batches]),
        np.concatenate([b.obs_mask for b in batches]),
        np.concatenate([b.channel_valid for b in batches]),
        np.concatenate([b.time_index for b in batches]),
        batches[0].channel_names,
    )


# ---------------------------------------------------------------- loading

def _parse_time(cell: str, row: int) -> float:
    try:
        return float(cell)
    except ValueError:
        pass
    try:
        stamp = np.datetime64(cell.strip(), "s")
    except ValueError as exc:
        raise DataFormatError(f"row {row}: unparseable timestamp {cell!r}") from exc
    return float(stamp.astype(np.int64))


def load_csv(path, sentinels: Iterable[float] = ()) -> TimeSeriesBatch:
    """Read a wide CSV (timestamp, channel_1, ..., channel_K) into a B=1 batch.

    Empty cells and any value listed in ``sentinels`` are treated as missing.
    """
    sentinels = [float(s) for s in sentinels]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise DataFormatError(f"{path}: no channel columns")
    K = len(header) - 1
    L = len(body)
    values = np.zeros((L, K))
    obs = np.zeros((L, K), dtype=bool)
    times = np.zeros(L)
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != K + 1:
            raise DataFormatError(f"{path}:{lineno}: expected {K + 1} cells, got {len(row)}")
        times[i] = _parse_time(row[0], lineno)
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("nan", "null", "na"):
                continue
            try:
                v = float(cell)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell {cell!r} in column {header[j + 1]!r}") from exc
            if any(v == s for s in sentinels):
                continue
            values[i, j] = v
            obs[i, j] = True
    return TimeSeriesBatch(values[None], obs[None], None, times[None], [h.strip() for h in header[1:]])


def load_jsonl(path) -> TimeSeriesBatch:
    """One JSON object per line: {"t": [...], "channels": {"name": [...]}}; null is missing.

    Series of unequal length are left-padded to the longest one.
    """
    series = []
    names: list[str] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            if "t" not in obj or "channels" not in obj:
                raise DataFormatError(f"{path}:{lineno}: object needs 't' and 'channels'")
            for name in obj["channels"]:
                if name not in names:
                    names.append(name)
            series.append((lineno, obj))
    if not series:
        raise DataFormatError(f"{path}: no series")
    if not names:
        raise DataFormatError(f"{path}: zero channels")
    L = max(len(obj["t"]) for _, obj in series)
    out = []
    for lineno, obj in series:
        t = np.asarray(obj["t"], dtype=np.float64)
        n = len(t)
        vals = np.zeros((n, len(names)))
        obs = np.zeros((n, len(names)), dtype=bool)
        for j, name in enumerate(names):
            col = obj["channels"].get(name)
            if col is None:
                continue
            if len(col) != n:
                raise DataFormatError(f"{path}:{lineno}: channel {name!r} has {len(col)} values for {n} timestamps")
            for i, v in enumerate(col):
                if v is None:
                    continue
                if not isinstance(v, (int, float)):
                    raise DataFormatError(f"{path}:{lineno}: non-numeric value {v!r} in {name!r}")
                vals[i, j] = v
                obs[i, j] = True
        b = TimeSeriesBatch(vals[None], obs[None], None, t[None], names)
        out.append(pad_time(b, L))
    return concat(out)


def load_dataset(path, fmt: str | None = None, sentinels: Iterable[float] = ()) -> TimeSeriesBatch:
    """Load a CSV/JSONL file, or every CSV in a directory stacked along the batch axis."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data path not found: {p}")
    if p.is_dir():
        files = sorted(p.glob("*.csv"))
        if not files:
            raise DataFormatError(f"{p}: directory holds no .csv files")
        return concat([load_csv(f, sentinels) for f in files])
    fmt = fmt or ("jsonl" if p.suffix in (".jsonl", ".json") else "csv")
    if fmt == "jsonl":
        return load_jsonl(p)
    return load_csv(p, sentinels)


def write_csv(batch: TimeSeriesBatch, path, index: int = 0) -> Path:
    """Write one series of ``batch`` in the wide CSV layout (missing cells left empty)."""
    path = Path(path)
    names = batch.channel_names or [f"c{j}" for j in range(batch.shape[2])]
    valid = np.flatnonzero(batch.channel_valid[index])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [names[j] for j in valid])
        for i in range(batch.shape[1]):
            row = [repr(float(batch.time_index[index, i]))]
            for j in valid:
                row.append(repr(float(batch.values[index, i, j])) if batch.obs_mask[index, i, j] else "")
            w.writerow(row)
    return path


def write_dataset(batch: TimeSeriesBatch, directory, stem: str = "series") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    return [write_csv(batch, d / f"{stem}_{i:04d}.csv", i) for i in range(len(batch))]


# ---------------------------------------------------------------- alignment

def inject_placeholders(series_list: Sequence[tuple[Sequence[float], Sequence[float]]],
                        names: list[str] | None = None) -> TimeSeriesBatch:
    """Place channels sampled on different grids onto the union of their timestamps.

    Grid points a channel does not cover become masked placeholders; no values
    are interpolated.
    """
    stamps = []
    for j, (t, v) in enumerate(series_list):
        t = np.asarray(t, dtype=np.float64)
        if len(t) != len(v):
            raise DataFormatError(f"channel {j}: {len(t)} timestamps but {len(v)} values")
        if len(np.unique(t)) != len(t):
            raise DataFormatError(f"channel {j}: duplicate timestamps")
        stamps.append(t)
    grid = np.unique(np.concatenate(stamps)) if stamps else np.zeros(0)
    K = len(series_list)
    values = np.zeros((len(grid), K))
    obs = np.zeros((len(grid), K), dtype=bool)
    for j, (t, v) in enumerate(series_list):
        if len(t) == 0:
            continue
        pos = np.searchsorted(grid, np.asarray(t, dtype=np.float64))
        values[pos, j] = np.asarray(v, dtype=np.float64)
        obs[pos, j] = True
    return TimeSeriesBatch(values[None], obs[None], None, grid[None], names)


def pad_time(batch: TimeSeriesBatch, L_target: int) -> TimeSeriesBatch:
    """Left-pad the time axis with masked zeros so the latest data sits at the end."""
    B, L, K = batch.shape
    if L > L_target:
        raise ValueError(f"series length {L} exceeds target {L_target}")
    if L == L_target:
        return batch
    pad = L_target - L
    values = np.concatenate([np.zeros((B, pad, K)), batch.values], axis=1)
    obs = np.concatenate([np.zeros((B, pad, K), dtype=bool), batch.obs_mask], axis=1)
    if L > 1:
        step = batch.time_index[:, 1:2] - batch.time_index[:, 0:1]
    else:
        step = np.ones((B, 1))
    lead = batch.time_index[:, :1] - step * np.arange(pad, 0, -1)[None, :]
    times = np.concatenate([lead, batch.time_index], axis=1)
    return TimeSeriesBatch(values, obs, batch.channel_valid, times, batch.channel_names)


def chunk_channels(batch: TimeSeriesBatch, K_max: int) -> list[TimeSeriesBatch]:
    """Split channels in order into groups of ``K_max``; pad the last group."""
    B, L, K = batch.shape
    chunks = []
    for start in range(0, K, K_max):
        stop = min(start + K_max, K)
        width = stop - start
        values = np.zeros((B, L, K_max))
        obs = np.zeros((B, L, K_max), dtype=bool)
        cv = np.zeros((B, K_max), dtype=bool)
        values[:, :, :width] = batch.values[:, :, start:stop]
        obs[:, :, :width] = batch.obs_mask[:, :, start:stop]
        cv[:, :width] = batch.channel_valid[:, start:stop]
        names = None
        if batch.channel_names is not None:
            names = list(batch.channel_names[start:stop]) + [f"_pad{i}" for i in range(K_max - width)]
        chunks.append(TimeSeriesBatch(values, obs, cv, batch.time_index, names))
    return chunks


def windows(batch: TimeSeriesBatch, L: int, stride: int | None = None) -> TimeSeriesBatch:
    """Cut every series into windows of length ``L`` (stride defaults to ``L``)."""
    stride = stride or L
    B, total, K = batch.shape
    if total < L:
        raise ValueError(f"window {L} longer than series {total}")
    starts = range(0, total - L + 1, stride)
    parts = []
    for b in range(B):
        for s in starts:
            parts.append((b, s))
    values = np.stack([batch.values[b, s:s + L] for b, s in parts])
    obs = np.stack([batch.obs_mask[b, s:s + L] for b, s in parts])
    cv = np.stack([batch.channel_valid[b] for b, _ in parts])
    ti = np.stack([batch.time_index[b, s:s + L] for b, s in parts])
    return TimeSeriesBatch(values, obs, cv, ti, batch.channel_names)


# ---------------------------------------------------------------- normalisation

@dataclass
class NormStats:
    mode: str
    loc: np.ndarray
    scale: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def normalize(batch: TimeSeriesBatch, mode: str = "standardize") -> tuple[TimeSeriesBatch, NormStats]:
    """Per-instance, per-channel scaling using observed cells only.

    ``standardize`` gives observed mean 0 / population variance 1, ``minmax``
    maps observed values to [0, 1], ``none`` is the identity.  Channels with no
    spread get scale 1 and are flagged in ``NormStats.degenerate``.
    """
    B, L, K = batch.shape
    obs = batch.obs_mask
    n = obs.sum(axis=1)
    safe_n = np.maximum(n, 1)
    if mode == "none":
        loc = np.zeros((B, K))
        scale = np.ones((B, K))
    elif mode == "standardize":
        loc = (batch.values * obs).sum(axis=1) / safe_n
        var = (((batch.values - loc[:, None, :]) ** 2) * obs).sum(axis=1) / safe_n
        scale = np.sqrt(var)
    elif mode == "minmax":
        big = np.where(obs, batch.values, np.inf).min(axis=1)
        small = np.where(obs, batch.values, -np.inf).max(axis=1)
        loc = np.where(n > 0, big, 0.0)
        scale = np.where(n > 0, small - big, 1.0)
    else:
        raise ValueError(f"unknown normalisation mode {mode!r}")
    degenerate = ~(scale > 1e-12)
    if mode != "none" and degenerate[batch.channel_valid].any():
        logger.warning("%d channel(s) have zero spread; using scale 1", int(degenerate[batch.channel_valid].sum()))
    scale = np.where(degenerate, 1.0, scale)
    values = (batch.values - loc[:, None, :]) / scale[:, None, :]
    out = replace(batch, values=np.where(obs, values, 0.0))
    return out, NormStats(mode, loc, scale, degenerate)


def denormalize(values, stats: NormStats, obs_mask=None) -> np.ndarray:
    """Invert ``normalize`` on an array or batch (B, L, K) or (n, B, L, K)."""
    if isinstance(values, TimeSeriesBatch):
        raw = denormalize(values.values, stats, values.obs_mask)
        return replace(values, values=raw)
    values = np.asarray(values, dtype=np.float64)
    raw = values * stats.scale[:, None, :] + stats.loc[:, None, :]
    if obs_mask is not None:
        raw = np.where(obs_mask, raw, 0.0)
    return raw


# ---------------------------------------------------------------- synthetic

def gen_sine(n: int, L: int, K: int, rng: np.random.Generator,
             freq_range: tuple[float, float] = (0.05, 0.25),
             phase_range: tuple[float, float] = (0.0, 2 * math.pi)) -> TimeSeriesBatch:
    """Fully observed sinusoids sin(f * j + phi) with f, phi uniform per (series, channel)."""
    if min(n, L, K) < 1:
        raise ValueError("n, L and K must be positive")
    freq = rng.uniform(*freq_range, size=(n, 1, K))
    phase = rng.uniform(*phase_range, size=(n, 1, K))
    j = np.arange(L, dtype=np.float64)[None, :, None]
    values = np.sin(freq * j + phase)
    return TimeSeriesBatch(values, np.ones_like(values, dtype=bool))
