"""Self-supervised training with the mixed mask objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .data import TimeSeriesBatch
from .diffusion import NoiseSchedule, training_loss
from .masks import split, training_masks

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    mask_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    grad_clip: float = 1.0
    log_every: int = 200


def train(model: torch.nn.Module, data: TimeSeriesBatch, schedule: NoiseSchedule, cfg: TrainConfig,
          masker=None) -> list[float]:
    """Adam on the masked epsilon loss; returns the per-step loss curve.

    ``masker(shape, rng)`` overrides the default random/block/stride mix.
    Fully determined by ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    masker = masker or (lambda shape, r: training_masks(shape, r, cfg.mask_probs))
    model.train()
    losses: list[float] = []
    n = len(data)
    for step in range(cfg.steps):
        idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        batch = data.select(idx)
        sp = split(batch, masker(batch.shape, rng), allow_empty=True)
        if not sp.tar_mask.any():
            losses.append(float("nan"))
            continue
        loss = training_loss(model, sp, schedule, gen)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        losses.append(float(loss.detach()))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info("step %d  loss %.4f", step + 1, float(np.nanmean(losses[-cfg.log_every:])))
    model.eval()
    return losses


def smoothed(losses: list[float], window: int = 100) -> float:
    """Mean of the last ``window`` finite losses."""
    tail = np.asarray(losses[-window:], dtype=np.float64)
    return float(np.nanmean(tail))
