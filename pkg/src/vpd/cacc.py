"""Confidence-aware contextual refinement of a feature volume.

Confident regions of a volume [C, D, H, W] pass through almost unchanged;
uncertain ones receive 2D context features that are attended to, lifted
along depth, and added back.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor
from .volume import confidence_map


def uncertainty_query(v_depth: Tensor) -> Tensor:
    """sigmoid of the negated per-channel maximum along D, giving [C, H, W]."""
    if v_depth.ndim != 4:
        raise ShapeError(f"uncertainty_query expects [C, D, H, W], got {v_depth.shape}")
    return T.sigmoid(-T.max_(v_depth, axis=1))


class DeformableKernel(nn.Module):
    """Deformable 3x3 convolution whose offsets are predicted from its input.

    The offset predictor starts at zero, so a fresh kernel behaves like an
    ordinary convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 k: int = 3, zero: bool = False):
        if out_channels % 2:
            raise ValueError(f"output channels must be even to split into keys and values, got {out_channels}")
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.k = k
        shape = (out_channels, in_channels, k, k)
        self.weight = nn.zeros_init(shape) if zero else nn.uniform_init(rng, shape, in_channels * k * k)
        self.bias = nn.zeros_init((out_channels,))
        self.offset_weight = nn.zeros_init((2 * k * k, in_channels, k, k))
        self.offset_bias = nn.zeros_init((2 * k * k,))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def offsets(self, f: Tensor) -> Tensor:
        c, h, w = f.shape
        off = T.conv2d(T.reshape(f, (1, c, h, w)), self.offset_weight, self.offset_bias,
                       padding=self.k // 2)
        return T.reshape(off, off.shape[1:])

    def forward(self, f: Tensor) -> Tensor:
        return T.deform_conv2d(f, self.offsets(f), self.weight, self.bias, padding=self.k // 2)


def deformable_kv(f: Tensor, kernel: DeformableKernel) -> tuple[Tensor, Tensor]:
    """Keys and values [C_a, H, W] from the two channel halves of a deformable convolution."""
    if f.ndim != 3:
        raise ShapeError(f"context features must be [C', H, W], got {f.shape}")
    out = kernel(f)
    if out.shape[0] % 2:
        raise ValueError(f"cannot split {out.shape[0]} channels into halves")
    half = out.shape[0] // 2
    return out[:half], out[half:]


def linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax_rows(q) @ (softmax_cols(k).T @ v) for row-token matrices [N, C_a]."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention inputs must be 2-D [positions, channels]")
    if q.shape[1] != k.shape[1] or k.shape[1] != v.shape[1]:
        raise ShapeError(f"channel mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} differ in positions")
    phi_q = T.softmax(q, axis=1)
    phi_k = T.softmax(k, axis=0)
    return phi_q @ (T.transpose(phi_k) @ v)


def lift_context(f_conf: Tensor, depth_dist: Tensor) -> Tensor:
    """Spread 2D features [C_a, H, W] over depth with a per-pixel distribution [1, D, H, W]."""
    if f_conf.ndim != 3 or depth_dist.ndim != 4 or depth_dist.shape[0] != 1:
        raise ShapeError(f"lift expects [C, H, W] and [1, D, H, W], got {f_conf.shape}, {depth_dist.shape}")
    if f_conf.shape[1:] != depth_dist.shape[2:]:
        raise ShapeError(f"spatial mismatch: features {f_conf.shape}, distribution {depth_dist.shape}")
    c, h, w = f_conf.shape
    return T.reshape(f_conf, (c, 1, h, w)) * depth_dist


def refine(v_depth: Tensor, conf: Tensor, v_context: Tensor) -> Tensor:
    """Gate the volume by confidence (broadcast along D) and add the lifted context."""
    if v_depth.shape != v_context.shape:
        raise ShapeError(f"volume {v_depth.shape} and context {v_context.shape} differ")
    c, _, h, w = v_depth.shape
    if conf.shape != (c, h, w):
        raise ShapeError(f"confidence {conf.shape} does not match volume {v_depth.shape}")
    return v_depth * T.reshape(conf, (c, 1, h, w)) + v_context


def cacc_block(v_depth: Tensor, f_context: Tensor, kernel: DeformableKernel,
               query_proj: nn.Linear | None = None) -> Tensor:
    """Full refinement of ``v_depth`` [C, D, H, W] with context ``f_context`` [C', H, W].

    ``query_proj`` maps the C query channels to the key width; it may be omitted
    when the two already agree.
    """
    if v_depth.ndim != 4:
        raise ShapeError(f"volume must be [C, D, H, W], got {v_depth.shape}")
    c, _, h, w = v_depth.shape
    if f_context.ndim != 3 or f_context.shape[1:] != (h, w):
        raise ShapeError(f"context {f_context.shape} does not match volume {v_depth.shape}")
    conf = confidence_map(T.sigmoid(v_depth))
    q = T.transpose(T.reshape(uncertainty_query(v_depth), (c, h * w)))
    if query_proj is not None:
        q = query_proj(q)
    keys, values = deformable_kv(f_context, kernel)
    ca = keys.shape[0]
    k_rows = T.transpose(T.reshape(keys, (ca, h * w)))
    v_rows = T.transpose(T.reshape(values, (ca, h * w)))
    f_conf = T.reshape(T.transpose(linear_attention(q, k_rows, v_rows)), (ca, h, w))
    if ca != c:
        raise ShapeError(f"attention width {ca} must equal volume channels {c} to lift")
    depth_dist = T.softmax(T.mean(v_depth, axis=0, keepdims=True), axis=1)
    return refine(v_depth, conf, lift_context(f_conf, depth_dist))


class CACC(nn.Module):
    """Parameter holder for :func:`cacc_block` at one UNet scale."""

    def __init__(self, channels: int, context_channels: int, rng: np.random.Generator, k: int = 3):
        self.query_proj = nn.Linear(channels, channels, rng)
        self.kernel = DeformableKernel(context_channels, 2 * channels, rng, k)

    def forward(self, v_depth: Tensor, f_context: Tensor) -> Tensor:
        return cacc_block(v_depth, f_context, self.kernel, self.query_proj)
