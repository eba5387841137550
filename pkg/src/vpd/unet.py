"""3D denoising UNet conditioned on a prior volume, a timestep, and 2D context features."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .cacc import CACC
from .tensor import ShapeError, Tensor

LEVELS = 3


@dataclass
class UNetConfig:
    base_channels: int = 16
    multipliers: tuple[int, int, int] = (1, 2, 4)
    depth: int = 16
    height: int = 32
    width: int = 32
    time_dim: int = 32
    groups: int = 8
    context_channels: int = 3
    seed: int = 0
    zero_head: bool = False

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        if len(self.multipliers) != LEVELS:
            raise ValueError(f"need {LEVELS} channel multipliers, got {self.multipliers}")
        for name in ("depth", "height", "width"):
            n = getattr(self, name)
            if n < 4 or n % 4:
                raise ValueError(f"{name} = {n} must be a positive multiple of 4")
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"{self.groups} groups do not divide channel width {c}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError(f"time embedding width must be even, got {self.time_dim}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.multipliers]

    def extents(self, level: int) -> tuple[int, int, int]:
        s = 2 ** level
        return self.depth // s, self.height // s, self.width // s

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def time_embed(t: float, width: int) -> np.ndarray:
    """Sinusoidal features: sines in the first half, cosines in the second."""
    if t < 0:
        raise ValueError(f"timestep must be non-negative, got {t}")
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


class ResidualLayer(nn.Module):
    """GroupNorm-SiLU-conv twice with an additive time shift; 1x1 skip when widths differ."""

    def __init__(self, cin: int, cout: int, time_dim: int, groups: int, rng: np.random.Generator):
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, rng)
        self.time_proj = nn.Linear(time_dim, cout, rng)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, rng)
        self.skip = nn.Conv3d(cin, cout, 1, rng) if cin != cout else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        shift = self.time_proj(temb)
        h = h + T.reshape(shift, (1, shift.shape[-1], 1, 1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        base = self.skip(x) if self.skip is not None else x
        return base + h


class UNet3D(nn.Module):
    """Encoder: per level two residual layers then CACC, stride-2 conv between levels.
    Decoder: trilinear upsampling, skip concat, 1x1x1 fuse, two residual layers.
    """

    def __init__(self, config: UNetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        ch = config.channels
        g, td = config.groups, config.time_dim
        self.time_mlp = nn.Linear(td, td, rng)
        self.conv_in = nn.Conv3d(2, ch[0], 3, rng)
        self.enc = []
        self.cacc = []
        self.down = []
        prev = ch[0]
        for lvl, c in enumerate(ch):
            self.enc.append(_Pair(ResidualLayer(prev, c, td, g, rng), ResidualLayer(c, c, td, g, rng)))
            self.cacc.append(CACC(c, config.context_channels, rng))
            if lvl < LEVELS - 1:
                self.down.append(nn.Conv3d(c, c, 3, rng, stride=2, padding=1))
            prev = c
        self.fuse = []
        self.dec = []
        for lvl in reversed(range(LEVELS)):
            c = ch[lvl]
            if lvl < LEVELS - 1:
                self.fuse.append(nn.Conv3d(prev + c, c, 1, rng))
            self.dec.append(_Pair(ResidualLayer(c, c, td, g, rng), ResidualLayer(c, c, td, g, rng)))
            prev = c
        self.norm_out = nn.GroupNorm(g, ch[0])
        self.head = nn.Conv3d(ch[0], 1, 3, rng, zero=config.zero_head)

    def forward(self, y_t, prior, t: float, contexts=None, use_cacc: bool = True) -> Tensor:
        """Raw head output [1, D, H, W]; apply :func:`to_probability` for a volume."""
        cfg = self.config
        y_t = y_t if isinstance(y_t, Tensor) else Tensor(np.asarray(y_t, dtype=T.get_default_dtype()))
        prior = prior if isinstance(prior, Tensor) else Tensor(np.asarray(prior, dtype=T.get_default_dtype()))
        want = (1, cfg.depth, cfg.height, cfg.width)
        if y_t.shape != want or prior.shape != want:
            raise ShapeError(f"expected volumes {want}, got y_t {y_t.shape} and prior {prior.shape}")
        ctx = self._check_contexts(contexts) if use_cacc else None

        temb = Tensor(time_embed(t, cfg.time_dim).astype(y_t.dtype))
        temb = T.silu(self.time_mlp(T.reshape(temb, (1, cfg.time_dim))))
        x = T.reshape(T.concat([y_t, prior], axis=0), (1, 2) + want[1:])
        h = self.conv_in(x)
        skips = []
        for lvl in range(LEVELS):
            h = self.enc[lvl].b(self.enc[lvl].a(h, temb), temb)
            if use_cacc:
                v = self.cacc[lvl](T.reshape(h, h.shape[1:]), ctx[lvl])
                h = T.reshape(v, (1,) + v.shape)
            skips.append(h)
            if lvl < LEVELS - 1:
                h = self.down[lvl](h)
        for i, lvl in enumerate(reversed(range(LEVELS))):
            if lvl < LEVELS - 1:
                h = T.upsample_trilinear(h, size=cfg.extents(lvl))
                h = self.fuse[i - 1](T.concat([h, skips[lvl]], axis=1))
            h = self.dec[i].b(self.dec[i].a(h, temb), temb)
        out = self.head(T.silu(self.norm_out(h)))
        return T.reshape(out, want)

    def _check_contexts(self, contexts) -> list[Tensor]:
        cfg = self.config
        if contexts is None or len(contexts) != LEVELS or any(c is None for c in contexts):
            raise ValueError(f"context features are required at all {LEVELS} encoder scales")
        out = []
        for lvl, c in enumerate(contexts):
            c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=T.get_default_dtype()))
            _, h, w = cfg.extents(lvl)
            if c.shape != (cfg.context_channels, h, w):
                raise ShapeError(f"context at scale {lvl} is {c.shape}, expected "
                                 f"{(cfg.context_channels, h, w)}")
            out.append(c)
        return out


class _Pair(nn.Module):
    def __init__(self, a: ResidualLayer, b: ResidualLayer):
        self.a = a
        self.b = b


def to_probability(raw) -> Tensor:
    """Sigmoid then normalization along D, giving a probability volume."""
    raw = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw))
    s = T.sigmoid(raw)
    return s / s.sum(axis=1, keepdims=True)
