"""Shared fixtures for the test modules: tiny models, parameter grad checks, quick training."""
import numpy as np
import torch
from torch.func import functional_call

from timedit.data import gen_sine, normalize
from timedit.diffusion import desk_schedule, training_loss
from timedit.masks import random_mask, split
from timedit.model import ModelConfig, init_model
from timedit.nn import grad_check

TINY = dict(d_model=16, n_heads=2, n_blocks=1, L_max=8, K_max=2, T=10, freq_dim=8, ff_mult=2)


def tiny_model(seed=0, randomize=True, **over):
    cfg = ModelConfig(**{**TINY, **over})
    model = init_model(cfg, seed)
    if randomize:
        # zero-initialised producers would make half of the gradient identically zero
        g = torch.Generator().manual_seed(seed + 1000)
        with torch.no_grad():
            for p in model.parameters():
                if not p.any():
                    p.copy_(torch.randn(p.shape, generator=g) * 0.2)
    return model


def tiny_split(seed=0, B=2, L=8, K=2):
    rng = np.random.default_rng(seed)
    b, _ = normalize(gen_sine(B, L, K, rng))
    return split(b, random_mask(b.shape, 0.5, rng))


def param_grad_check(model, sp, schedule=None, seed=0, per_tensor=3, tol=1e-3):
    """Finite differences of the training loss w.r.t. a flat parameter vector, a few coords per tensor."""
    schedule = schedule or desk_schedule(model.config.T)
    names = [n for n, _ in model.named_parameters()]
    shapes = [p.shape for _, p in model.named_parameters()]
    sizes = [p.numel() for _, p in model.named_parameters()]
    flat = torch.cat([p.detach().reshape(-1) for _, p in model.named_parameters()])

    def loss(vec):
        params, off = {}, 0
        for n, s, k in zip(names, shapes, sizes):
            params[n] = vec[off:off + k].reshape(s)
            off += k
        net = lambda *a: functional_call(model, params, a)
        return training_loss(net, sp, schedule, torch.Generator().manual_seed(seed))

    rng = np.random.default_rng(seed)
    coords, off = [], 0
    for k in sizes:
        coords.extend(off + rng.choice(k, size=min(per_tensor, k), replace=False))
        off += k
    return grad_check(loss, flat, coords=coords, tol=tol)
