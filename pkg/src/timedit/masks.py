"""Task masks and the condition/target split.

Convention throughout: mask value 1 marks a visible (condition) cell, 0 a cell
the model has to denoise (target).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import TimeSeriesBatch

KINDS = ("random", "block", "stride", "reconstruction", "custom", "mixed")


class EmptyTargetError(ValueError):
    """The split leaves no cell to predict."""


@dataclass
class TaskMask:
    mask: np.ndarray
    kind: str

    def __post_init__(self):
        m = np.asarray(self.mask)
        if not np.isin(m, (0, 1)).all():
            raise ValueError("task mask must be binary")
        self.mask = m.astype(bool)
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @property
    def shape(self):
        return self.mask.shape


def random_mask(shape, r: float, rng: np.random.Generator) -> TaskMask:
    """Each (time, channel) cell visible iff an independent uniform draw exceeds ``r``."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {r}")
    z = rng.uniform(size=shape)
    return TaskMask(z > r, "random")


def block_mask(shape, l: int) -> TaskMask:
    """Hide the final ``l`` time steps of every channel."""
    B, L, K = shape
    if not 0 <= l <= L:
        raise ValueError(f"block length {l} outside [0, {L}]")
    j = np.arange(L)
    m = np.broadcast_to((j < L - l)[None, :, None], shape)
    return TaskMask(m.copy(), "block")


def stride_mask(shape, n_blocks: int) -> TaskMask:
    """Alternate visible/hidden blocks of length ceil(L / n_blocks), starting visible."""
    B, L, K = shape
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    b = math.ceil(L / n_blocks)
    j = np.arange(L)
    m = np.broadcast_to(((j // b) % 2 == 0)[None, :, None], shape)
    return TaskMask(m.copy(), "stride")


def reconstruction_mask(shape) -> TaskMask:
    return TaskMask(np.zeros(shape, dtype=bool), "reconstruction")


def custom_mask(mask) -> TaskMask:
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    return TaskMask(m, "custom")


def load_mask(path) -> TaskMask:
    """Read a user mask in the dataset layouts (wide CSV or JSON lines); 1 = visible."""
    from .data import load_dataset

    batch = load_dataset(Path(path))
    if not batch.obs_mask.all():
        raise ValueError(f"{path}: mask file has empty cells")
    return custom_mask(batch.values)


@dataclass
class ConditionTargetSplit:
    x_con: np.ndarray
    x_tar: np.ndarray
    con_mask: np.ndarray
    tar_mask: np.ndarray
    channel_valid: np.ndarray

    @property
    def shape(self):
        return self.x_con.shape

    @property
    def values(self) -> np.ndarray:
        """Condition and target values merged back into one array."""
        return self.x_con + self.x_tar

    def select(self, idx) -> "ConditionTargetSplit":
        idx = np.atleast_1d(np.asarray(idx))
        return ConditionTargetSplit(self.x_con[idx], self.x_tar[idx], self.con_mask[idx],
                                    self.tar_mask[idx], self.channel_valid[idx])


def split(batch: TimeSeriesBatch, task_mask: TaskMask | np.ndarray, allow_empty: bool = False) -> ConditionTargetSplit:
    """Route every valid observed cell to exactly one of condition/target."""
    m = task_mask.mask if isinstance(task_mask, TaskMask) else np.asarray(task_mask).astype(bool)
    if m.shape != batch.shape:
        m = np.broadcast_to(m, batch.shape) if m.ndim == 3 and m.shape[0] == 1 else m
    if m.shape != batch.shape:
        raise ValueError(f"mask shape {m.shape} != batch shape {batch.shape}")
    usable = batch.obs_mask & batch.channel_valid[:, None, :]
    con = m & usable
    tar = ~m & usable
    if not allow_empty and not tar.any():
        raise EmptyTargetError("target mask is empty: nothing to predict")
    x = batch.values
    return ConditionTargetSplit(np.where(con, x, 0.0), np.where(tar, x, 0.0), con, tar, batch.channel_valid.copy())


def training_masks(shape, rng: np.random.Generator, probs=(1 / 3, 1 / 3, 1 / 3),
                   ratio_range=(0.1, 0.9), max_block_frac: float = 0.5,
                   n_blocks_range=(2, 8)) -> TaskMask:
    """Self-supervised mask mix: one of random/block/stride per batch element."""
    B, L, K = shape
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (3,) or (probs < 0).any() or probs.sum() <= 0:
        raise ValueError("mask mix needs three non-negative probabilities")
    probs = probs / probs.sum()
    out = np.empty(shape, dtype=bool)
    one = (1, L, K)
    for b in range(B):
        kind = rng.choice(3, p=probs)
        if kind == 0:
            m = random_mask(one, rng.uniform(*ratio_range), rng)
        elif kind == 1:
            m = block_mask(one, int(rng.integers(1, max(1, int(L * max_block_frac)) + 1)))
        else:
            m = stride_mask(one, int(rng.integers(n_blocks_range[0], n_blocks_range[1] + 1)))
        out[b] = m.mask[0]
    return TaskMask(out, "mixed")
