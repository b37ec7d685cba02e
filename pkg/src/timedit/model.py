"""Conditional diffusion transformer denoiser.

The noised target stream and the condition stream are embedded separately.
Diffusion-step information is added to the target tokens; the condition
stream drives per-token AdaLN scale/shift in every block.  Tokens are time
steps by default, with channel-, patch- and dual-axis layouts available for
ablations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from . import nn as tnn

CONDITIONING = ("adaln", "additive", "cross_attention", "token_concat")
ATTENTION = ("temporal", "channel", "dual", "patch")


class ShapeOverflowError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 4
    L_max: int = 96
    K_max: int = 8
    T: int = 100
    mask_channel: bool = True
    conditioning: str = "adaln"
    attention: str = "temporal"
    patch_len: int = 8
    patch_stride: int = 8
    cond_pooling: str = "time"
    ff_mult: int = 4
    freq_dim: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}")
        if self.attention not in ATTENTION:
            raise ValueError(f"attention must be one of {ATTENTION}")
        if self.cond_pooling not in ("time", "global"):
            raise ValueError("cond_pooling must be 'time' or 'global'")
        if min(self.d_model, self.n_blocks, self.L_max, self.K_max, self.T) < 1:
            raise ValueError("sizes must be positive")
        if self.attention == "patch":
            if self.patch_len > self.L_max or (self.L_max - self.patch_len) % self.patch_stride:
                raise ValueError("patches must tile L_max exactly: (L_max - patch_len) % patch_stride == 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(d, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / d)
    table = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.to(torch.get_default_dtype())


def step_frequencies(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


def adaln(h: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """scale * LayerNorm(h) + shift."""
    return scale * tnn.layer_norm(h, 1e-6) + shift


def _trunc_normal(module: nn.Linear, std: float = 0.02):
    nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


def _xavier(module: nn.Linear):
    nn.init.xavier_uniform_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


def _zero(module: nn.Linear):
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, context=None, key_valid=None):
        """x: (N, Lq, d); context: (N, Lk, d) or None for self-attention; key_valid: (N, Lk)."""
        context = x if context is None else context
        n, lq, d = x.shape
        lk = context.shape[1]
        h = self.n_heads
        q = self.q(x).reshape(n, lq, h, d // h).transpose(1, 2)
        k, v = self.kv(context).reshape(n, lk, 2, h, d // h).permute(2, 0, 3, 1, 4)
        mask = None if key_valid is None else ~key_valid[:, None, None, :]
        o = tnn.softmax_attention(q, k, v, mask)
        return self.out(o.transpose(1, 2).reshape(n, lq, d))


def _along(x: torch.Tensor, axis: int):
    """Move token ``axis`` of (B, *grid, d) to position -2 and flatten the rest into the batch."""
    moved = x.movedim(axis, -2)
    shape = moved.shape
    return moved.reshape(-1, shape[-2], shape[-1]), shape


def _back(y: torch.Tensor, shape, axis: int):
    return y.reshape(shape).movedim(-2, axis)


class AdaLNBlock(nn.Module):
    """Pre-norm block: [AdaLN -> self-attention -> residual] per token axis, then AdaLN -> FFN -> residual."""

    def __init__(self, cfg: ModelConfig, axes: tuple[int, ...]):
        super().__init__()
        d = cfg.d_model
        self.axes = axes
        self.attn = nn.ModuleList([Attention(d, cfg.n_heads) for _ in axes])
        self.cross = Attention(d, cfg.n_heads) if cfg.conditioning == "cross_attention" else None
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_mult * d), nn.GELU(), nn.Linear(cfg.ff_mult * d, d))
        self.n_sites = len(axes) + 1
        self.modulation = nn.Linear(d, 2 * self.n_sites * d) if cfg.conditioning == "adaln" else None
        for m in [*self.attn, *([self.cross] if self.cross else [])]:
            _trunc_normal(m.q), _trunc_normal(m.kv), _trunc_normal(m.out)
        _trunc_normal(self.ff[0]), _trunc_normal(self.ff[2])
        if self.modulation is not None:
            _zero(self.modulation)

    def modulation_params(self, cond: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Effective (scale, shift) per normalisation site; (1, 0) while the producer is zero."""
        raw = self.modulation(torch.nn.functional.silu(cond)).chunk(2 * self.n_sites, dim=-1)
        return [(1 + raw[2 * i], raw[2 * i + 1]) for i in range(self.n_sites)]

    def forward(self, h, cond=None, key_valid=None, cond_flat=None, cond_valid=None):
        """h: (B, *grid, d); cond: same layout (AdaLN source) or None for a plain pre-norm block.

        key_valid is a list of per-axis validity masks shaped like the grid.
        """
        mods = self.modulation_params(cond) if (self.modulation is not None and cond is not None) else None
        for i, (axis, attn) in enumerate(zip(self.axes, self.attn)):
            z = adaln(h, *mods[i]) if mods else tnn.layer_norm(h, 1e-6)
            flat, shape = _along(z, axis)
            kv = None
            if key_valid is not None:
                kv, _ = _along(key_valid[i].unsqueeze(-1), axis)
                kv = kv[..., 0]
            h = h + _back(attn(flat, key_valid=kv), shape, axis)
        if self.cross is not None and cond_flat is not None:
            z = tnn.layer_norm(h, 1e-6)
            B, d = z.shape[0], z.shape[-1]
            q = z.reshape(B, -1, d)
            h = h + self.cross(q, cond_flat, cond_valid).reshape(h.shape)
        z = adaln(h, *mods[-1]) if mods else tnn.layer_norm(h, 1e-6)
        return h + self.ff(z)


class DenoiserModel(nn.Module):
    """Epsilon-prediction network; call signature matches the diffusion ``Denoiser`` protocol."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        d = cfg.d_model
        c_in = 2 if cfg.mask_channel else 1
        self.c_in = c_in
        mode = cfg.attention
        if mode == "temporal":
            feat = cfg.K_max * c_in
            self.n_pos = cfg.L_max
        elif mode == "channel":
            feat = cfg.L_max * c_in
            self.n_pos = cfg.K_max
        elif mode == "patch":
            feat = cfg.patch_len * cfg.K_max * c_in
            self.n_pos = (cfg.L_max - cfg.patch_len) // cfg.patch_stride + 1
        else:
            feat = c_in
            self.n_pos = cfg.L_max
        self.in_tar = nn.Linear(feat, d)
        self.in_con = nn.Linear(feat, d)
        self.register_buffer("pos", sinusoid_table(self.n_pos, d), persistent=False)
        if mode == "dual":
            self.register_buffer("chan_pos", sinusoid_table(cfg.K_max, d).flip(-1), persistent=False)
        self.step_mlp = nn.Sequential(nn.Linear(cfg.freq_dim, d), nn.GELU(), nn.Linear(d, d))
        axes = (1, 2) if mode == "dual" else (1,)
        self.blocks = nn.ModuleList([AdaLNBlock(cfg, axes) for _ in range(cfg.n_blocks)])
        out = {"temporal": cfg.K_max, "channel": cfg.L_max, "patch": cfg.patch_len * cfg.K_max, "dual": 1}[mode]
        self.head = nn.Linear(d, out)
        _xavier(self.in_tar), _xavier(self.in_con)
        _trunc_normal(self.step_mlp[0]), _trunc_normal(self.step_mlp[2])
        _zero(self.head)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- layout helpers ---------------------------------------------------

    def _pad_time(self, x: torch.Tensor) -> torch.Tensor:
        """Left-pad (B, L, ...) to (B, L_max, ...)."""
        L = x.shape[1]
        pad = self.config.L_max - L
        if pad == 0:
            return x
        return torch.cat([x.new_zeros((x.shape[0], pad, *x.shape[2:])), x], dim=1)

    def _tokens(self, feat: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
        """feat (B, L, K_max, c) -> tokens in the configured layout."""
        cfg = self.config
        B, L, K, c = feat.shape
        mode = cfg.attention
        if mode == "temporal":
            return proj(feat.reshape(B, L, K * c)) + self.pos[cfg.L_max - L:]
        if mode == "channel":
            full = self._pad_time(feat)
            return proj(full.permute(0, 2, 1, 3).reshape(B, K, cfg.L_max * c)) + self.pos
        if mode == "patch":
            full = self._pad_time(feat).reshape(B, cfg.L_max, K * c)
            patches = full.unfold(1, cfg.patch_len, cfg.patch_stride)  # (B, P, K*c, patch_len)
            patches = patches.permute(0, 1, 3, 2).reshape(B, self.n_pos, -1)
            return proj(patches) + self.pos
        return proj(feat) + self.pos[cfg.L_max - L:, None, :] + self.chan_pos[None, :K, :]

    def _validity(self, present: torch.Tensor, cv: torch.Tensor) -> list[torch.Tensor]:
        """Key validity per attention axis.  present: (B, L, K_max) cells in either stream."""
        cfg = self.config
        mode = cfg.attention
        if mode == "temporal":
            return [present.any(-1)]
        if mode == "channel":
            return [cv & present.any(1)]
        if mode == "patch":
            full = self._pad_time(present.any(-1, keepdim=True).to(torch.float32))[..., 0]
            return [full.unfold(1, cfg.patch_len, cfg.patch_stride).amax(-1) > 0]
        B, L, K = present.shape
        time_ok = present.any(-1)[:, :, None].expand(B, L, K)
        chan_ok = cv[:, None, :].expand(B, L, K)
        return [time_ok, chan_ok]

    def _head(self, h: torch.Tensor, L: int) -> torch.Tensor:
        cfg = self.config
        mode = cfg.attention
        y = self.head(tnn.layer_norm(h, 1e-6))
        if mode == "temporal":
            return y
        if mode == "channel":
            return y.transpose(1, 2)[:, cfg.L_max - L:, :]
        if mode == "dual":
            return y[..., 0]
        B = y.shape[0]
        y = y.reshape(B, self.n_pos, cfg.patch_len, cfg.K_max)
        starts = torch.arange(self.n_pos) * cfg.patch_stride
        idx = (starts[:, None] + torch.arange(cfg.patch_len)[None, :]).reshape(-1)
        acc = y.new_zeros(B, cfg.L_max, cfg.K_max).index_add(1, idx, y.reshape(B, -1, cfg.K_max))
        count = y.new_zeros(cfg.L_max).index_add(0, idx, y.new_ones(idx.numel()))
        return (acc / count[None, :, None])[:, cfg.L_max - L:, :]

    # -- forward ----------------------------------------------------------

    def embed(self, x_t, t, x_con, con_mask, tar_mask, channel_valid=None):
        """Return (target tokens, condition embedding, key validity, padded channel validity)."""
        cfg = self.config
        B, L, K = x_t.shape
        if L > cfg.L_max or K > cfg.K_max:
            raise ShapeOverflowError(f"input (L={L}, K={K}) exceeds model limits (L_max={cfg.L_max}, K_max={cfg.K_max})")
        dtype = self.in_tar.weight.dtype
        if channel_valid is None:
            channel_valid = torch.ones(B, K, dtype=torch.bool)
        pad = cfg.K_max - K

        def widen(a, fill=0):
            a = torch.as_tensor(a)
            if pad == 0:
                return a
            return torch.cat([a, torch.full((*a.shape[:-1], pad), fill, dtype=a.dtype)], dim=-1)

        cv = widen(torch.as_tensor(channel_valid, dtype=torch.bool), False)
        valid = cv[:, None, :]
        tar = widen(torch.as_tensor(tar_mask, dtype=torch.bool), False) & valid
        con = widen(torch.as_tensor(con_mask, dtype=torch.bool), False) & valid
        zero = torch.zeros((), dtype=dtype)
        xt = torch.where(tar, widen(x_t.to(dtype)), zero)
        xc = torch.where(con, widen(torch.as_tensor(x_con).to(dtype)), zero)
        if cfg.mask_channel:
            tf = torch.stack([xt, tar.to(dtype)], dim=-1)
            cf = torch.stack([xc, con.to(dtype)], dim=-1)
        else:
            tf, cf = xt[..., None], xc[..., None]
        tokens = self._tokens(tf, self.in_tar)
        cond = self._tokens(cf, self.in_con)
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        step = self.step_mlp(step_frequencies(t, cfg.freq_dim).to(dtype))
        step = step.reshape(B, *([1] * (tokens.dim() - 2)), -1)
        tokens = tokens + step
        key_valid = self._validity(tar | con, cv)
        if cfg.cond_pooling == "global":
            w = key_valid[0].to(dtype).unsqueeze(-1)
            dims = tuple(range(1, cond.dim() - 1))
            pooled = (cond * w).sum(dims, keepdim=True) / w.sum(dims, keepdim=True).clamp_min(1)
            cond = pooled.expand_as(cond)
        return tokens, cond, key_valid, cv

    def forward(self, x_t, t, x_con, con_mask, tar_mask, channel_valid=None):
        cfg = self.config
        B, L, K = x_t.shape
        tokens, cond, key_valid, cv = self.embed(x_t, t, x_con, con_mask, tar_mask, channel_valid)
        block_cond = None
        cond_flat = cond_valid = None
        n_tok = tokens.shape[1]
        if cfg.conditioning == "adaln":
            block_cond = cond
        elif cfg.conditioning == "additive":
            tokens = tokens + cond
        elif cfg.conditioning == "cross_attention":
            d = cond.shape[-1]
            cond_flat = cond.reshape(B, -1, d)
            cond_valid = torch.ones(cond_flat.shape[:2], dtype=torch.bool)
        else:  # token_concat along the first token axis
            tokens = torch.cat([tokens, cond], dim=1)
            key_valid = [torch.cat([kv, kv], dim=1) for kv in key_valid]
        for block in self.blocks:
            tokens = block(tokens, block_cond, key_valid, cond_flat, cond_valid)
        tokens = tokens[:, :n_tok]
        eps = self._head(tokens, L)[..., :K]
        return tnn.check_finite(eps, "eps prediction")


def init_model(config: ModelConfig, seed: int = 0) -> DenoiserModel:
    """Build a model with deterministic initialisation from ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = DenoiserModel(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def predict_eps(model: DenoiserModel, x_t, t, x_con, con_mask, tar_mask, channel_valid=None) -> torch.Tensor:
    return model(x_t, t, x_con, con_mask, tar_mask, channel_valid)
