"""Discriminative and predictive scores for synthetic series (post-hoc recurrent learners)."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn


class _Recurrent(nn.Module):
    def __init__(self, d_in: int, d_out: int, hidden: int = 32, layers: int = 2):
        super().__init__()
        self.rnn = nn.LSTM(d_in, hidden, num_layers=layers, batch_first=True)
        self.out = nn.Linear(hidden, d_out)

    def forward(self, x):
        h, _ = self.rnn(x)
        return self.out(h)


def _as_windows(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"{name} must be (N, L, K), got {a.shape}")
    return a


def _split(n: int, rng: np.random.Generator, frac: float = 0.8):
    idx = rng.permutation(n)
    cut = int(round(frac * n))
    return idx[:cut], idx[cut:]


def _fit(model, loss_fn, inputs, targets, steps, batch, lr, gen):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = inputs.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch, n),), generator=gen)
        loss = loss_fn(model(inputs[idx]), targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def discriminative_score(real, synth, seed: int = 0, steps: int = 500, hidden: int = 32, batch: int = 128,
                         lr: float = 1e-3) -> float:
    """|held-out accuracy - 0.5| of a recurrent classifier separating real (1) from synthetic (0)."""
    real, synth = _as_windows(real, "real"), _as_windows(synth, "synth")
    if real.shape[0] != synth.shape[0]:
        raise ValueError("real and synthetic sets must have equal counts")
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError("real and synthetic windows differ in shape")
    if real.shape[0] < 5:
        raise ValueError("need at least 5 windows per side to split")
    rng = np.random.default_rng(seed)
    tr_r, te_r = _split(len(real), rng)
    tr_s, te_s = _split(len(synth), rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        model = _Recurrent(real.shape[-1], 1, hidden)
        x = torch.from_numpy(np.concatenate([real[tr_r], synth[tr_s]]))
        y = torch.cat([torch.ones(len(tr_r)), torch.zeros(len(tr_s))])
        bce = nn.BCEWithLogitsLoss()
        _fit(model, lambda out, tgt: bce(out[:, -1, 0], tgt), x, y, steps, batch, lr, gen)
        with torch.no_grad():
            xt = torch.from_numpy(np.concatenate([real[te_r], synth[te_s]]))
            yt = torch.cat([torch.ones(len(te_r)), torch.zeros(len(te_s))])
            pred = (model(xt)[:, -1, 0] > 0).float()
            acc = float((pred == yt).float().mean())
    return abs(acc - 0.5)


def predictive_score(real, synth, seed: int = 0, steps: int = 500, hidden: int = 32, batch: int = 128,
                     lr: float = 1e-3) -> float:
    """Train a one-step-ahead predictor on synthetic windows, report its MAE on held-out real windows."""
    real, synth = _as_windows(real, "real"), _as_windows(synth, "synth")
    if real.shape[1] < 2 or synth.shape[1] < 2:
        raise ValueError("windows need at least 2 time steps")
    if real.shape[2] != synth.shape[2]:
        raise ValueError("real and synthetic windows differ in channel count")
    if not (np.isfinite(real).all() and np.isfinite(synth).all()):
        raise ValueError("degenerate windows: non-finite values")
    if min(len(real), len(synth)) < 5:
        raise ValueError("need at least 5 windows per side to split")
    rng = np.random.default_rng(seed)
    tr_s, _ = _split(len(synth), rng)
    _, te_r = _split(len(real), rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        K = real.shape[-1]
        model = _Recurrent(K, K, hidden)
        s = torch.from_numpy(synth[tr_s])
        _fit(model, lambda out, tgt: (out - tgt).abs().mean(), s[:, :-1], s[:, 1:], steps, batch, lr, gen)
        with torch.no_grad():
            r = torch.from_numpy(real[te_r])
            mae = float((model(r[:, :-1]) - r[:, 1:]).abs().mean())
    return mae
