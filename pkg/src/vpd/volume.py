"""Depth-probability volumes and the operations defined on them.

Volumes are laid out [C, D, H, W]. A probability volume has C == 1 and sums
to one along D at every pixel. Operations that sit inside the training graph
(probabilization, soft-argmin, confidence, the occupancy head) take and return
:class:`~vpd.tensor.Tensor`; the discrete ones (projection, WTA, filtering,
unity regression) work on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

ONE_HOT = "one_hot"
TWO_BIN = "two_bin"
_MODES = (ONE_HOT, TWO_BIN)


@dataclass(frozen=True)
class HypothesisPlanes:
    """Strictly increasing metric depths of the sweep grid."""

    depths: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64)
        if d.ndim != 1 or d.size < 2:
            raise ValueError(f"need at least two hypothesis planes, got shape {d.shape}")
        if not np.all(np.diff(d) > 0):
            raise ValueError("hypothesis planes must be strictly increasing")
        object.__setattr__(self, "depths", d)

    @classmethod
    def uniform(cls, d_min: float, d_max: float, count: int) -> "HypothesisPlanes":
        return cls(np.linspace(d_min, d_max, count))

    @property
    def d_min(self) -> float:
        return float(self.depths[0])

    @property
    def d_max(self) -> float:
        return float(self.depths[-1])

    def __len__(self) -> int:
        return self.depths.size

    @property
    def mean_spacing(self) -> float:
        return float(np.diff(self.depths).mean())

    def nearest_index(self, depth) -> np.ndarray:
        """Index of the closest plane; exact midpoints go to the lower plane."""
        depth = np.asarray(depth, dtype=np.float64)
        hi = np.clip(np.searchsorted(self.depths, depth, side="left"), 1, len(self) - 1)
        lo = hi - 1
        take_lo = (depth - self.depths[lo]) <= (self.depths[hi] - depth)
        return np.where(take_lo, lo, hi)

    def quantize(self, depth) -> np.ndarray:
        return self.depths[self.nearest_index(depth)]


@dataclass
class DepthMap:
    """Metric depths [H, W] with a validity mask.

    ``depths`` may be a Tensor when the map is the output of a differentiable head.
    """

    depths: np.ndarray | Tensor
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = self.depths.shape
        if len(shape) != 2:
            raise ShapeError(f"depth map must be [H, W], got {shape}")
        if self.mask is None:
            self.mask = np.ones(shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != shape:
                raise ShapeError(f"mask {self.mask.shape} does not match depths {shape}")

    @property
    def values(self) -> np.ndarray:
        return self.depths.data if isinstance(self.depths, Tensor) else np.asarray(self.depths)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths.shape


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def check_probability_volume(v, atol: float = 1e-5) -> None:
    """Raise if ``v`` is not a per-pixel distribution along D."""
    a = _array(v)
    if a.ndim != 4:
        raise ShapeError(f"probability volume must be [C, D, H, W], got {a.shape}")
    if a.min() < 0 or a.max() > 1:
        raise ValueError("probability volume entries must lie in [0, 1]")
    err = np.abs(a.sum(axis=1) - 1).max()
    if err > atol:
        raise ValueError(f"probability volume rows deviate from 1 by {err:.3g}")


def probabilize(cost) -> Tensor:
    """Softmax along D turning a cost volume [C, D, H, W] into a probability volume."""
    cost = cost if isinstance(cost, Tensor) else Tensor(np.asarray(cost))
    if cost.ndim != 4:
        raise ShapeError(f"cost volume must be [C, D, H, W], got {cost.shape}")
    if not np.all(np.isfinite(cost.data)):
        raise ValueError("cost volume contains NaN or Inf")
    return T.softmax(cost, axis=1)


def uniform_volume(depth: int, height: int, width: int, dtype=np.float32) -> np.ndarray:
    return np.full((1, depth, height, width), 1.0 / depth, dtype=dtype)


def project_unimodal(gt: DepthMap, planes: HypothesisPlanes, mode: str = ONE_HOT,
                     dtype=np.float32) -> np.ndarray:
    """Encode each valid depth as a single-peak distribution over the planes.

    ``one_hot`` puts all mass on the nearest plane; ``two_bin`` splits it
    linearly between the two bracketing planes. Masked-out pixels get the
    uniform distribution.
    """
    if mode not in _MODES:
        raise ValueError(f"unknown projection mode {mode!r}")
    d = gt.values.astype(np.float64)
    mask = gt.mask
    bad = mask & ((d < planes.d_min) | (d > planes.d_max) | ~np.isfinite(d))
    if bad.any():
        ys, xs = np.nonzero(bad)
        raise ValueError(
            f"depth {d[ys[0], xs[0]]!r} at pixel (h={ys[0]}, w={xs[0]}) outside "
            f"[{planes.d_min}, {planes.d_max}] ({bad.sum()} pixels in total)")
    n = len(planes)
    h, w = d.shape
    out = np.zeros((1, n, h, w), dtype=np.float64)
    rows, cols = np.nonzero(mask)
    dv = d[rows, cols]
    if mode == ONE_HOT:
        out[0, planes.nearest_index(dv), rows, cols] = 1.0
    else:
        lo = np.clip(np.searchsorted(planes.depths, dv, side="right") - 1, 0, n - 2)
        span = planes.depths[lo + 1] - planes.depths[lo]
        w_hi = (dv - planes.depths[lo]) / span
        out[0, lo, rows, cols] = 1.0 - w_hi
        out[0, lo + 1, rows, cols] += w_hi
    out[0, :, ~mask] = 1.0 / n
    return out.astype(dtype)


def wta(v, planes: HypothesisPlanes) -> tuple[DepthMap, np.ndarray]:
    """Winner-takes-all along D: depth of the argmax plane and its probability.

    Ties go to the lowest plane index. Returns the depth map and a confidence
    map [1, H, W].
    """
    a = _array(v)
    if a.ndim != 4 or a.shape[0] != 1:
        raise ShapeError(f"wta expects a [1, D, H, W] volume, got {a.shape}")
    if a.shape[1] != len(planes):
        raise ShapeError(f"volume has {a.shape[1]} planes but the grid has {len(planes)}")
    idx = np.argmax(a[0], axis=0)
    conf = np.take_along_axis(a[0], idx[None], axis=0)
    return DepthMap(planes.depths[idx]), conf


def online_filter(y, planes: HypothesisPlanes, mode: str = ONE_HOT) -> np.ndarray:
    """Re-project the WTA depth of ``y`` to a unimodal volume."""
    depth, _ = wta(y, planes)
    return project_unimodal(depth, planes, mode, dtype=_array(y).dtype)


def confidence_map(v: Tensor) -> Tensor:
    """Per-channel maximum along D of a [C, D, H, W] volume, giving [C, H, W]."""
    if v.ndim != 4:
        raise ShapeError(f"confidence_map expects [C, D, H, W], got {v.shape}")
    return T.max_(v, axis=1)


def soft_argmin_depth(v: Tensor, planes: HypothesisPlanes, mask=None) -> DepthMap:
    """Expected depth under the per-pixel distribution (differentiable)."""
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v))
    if v.ndim != 4 or v.shape[0] != 1 or v.shape[1] != len(planes):
        raise ShapeError(f"soft_argmin expects [1, {len(planes)}, H, W], got {v.shape}")
    p = Tensor(planes.depths.astype(v.dtype).reshape(1, -1, 1, 1))
    return DepthMap((v * p).sum(axis=1)[0], mask)


def unity_regress_depth(unity, planes: HypothesisPlanes) -> DepthMap:
    """Pick the argmax plane and shift by the unity deficit toward the stronger neighbour.

    ``depth = planes[m] + (1 - u[m]) * s * |planes[m + s] - planes[m]|`` with
    ``s`` = +1 or -1 pointing at the larger neighbour (+1 on ties), clamped to
    the grid range.
    """
    a = _array(unity)[0].astype(np.float64)
    n = a.shape[0]
    m = np.argmax(a, axis=0)
    u = np.take_along_axis(a, m[None], axis=0)[0]
    left = np.where(m > 0, np.take_along_axis(a, np.maximum(m - 1, 0)[None], 0)[0], -np.inf)
    right = np.where(m < n - 1, np.take_along_axis(a, np.minimum(m + 1, n - 1)[None], 0)[0], -np.inf)
    step = np.where(right >= left, 1, -1)
    nb = np.clip(m + step, 0, n - 1)
    p = planes.depths
    depth = p[m] + (1.0 - u) * step * np.abs(p[nb] - p[m])
    return DepthMap(np.clip(depth, planes.d_min, planes.d_max))


def normalize_along_depth(v: np.ndarray) -> np.ndarray:
    """Clip negatives and rescale each pixel's column to sum to one."""
    a = np.clip(v, 0, None)
    s = a.sum(axis=1, keepdims=True)
    d = a.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(s > 0, a / np.where(s > 0, s, 1), 1.0 / d)
    return out.astype(v.dtype, copy=False)


class OccupancyHead(nn.Module):
    """1x1x1 projection to class logits, trilinear upsampling, softmax over classes."""

    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator,
                 upsample_factor: int = 1):
        if upsample_factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {upsample_factor}")
        self.proj = nn.Conv3d(in_channels, num_classes, 1, rng)
        self.num_classes = num_classes
        self.upsample_factor = upsample_factor

    def forward(self, v: Tensor) -> Tensor:
        return occupancy_head(v, self.proj.weight, self.proj.bias, self.upsample_factor)


def occupancy_head(v: Tensor, weight: Tensor, bias: Tensor | None, upsample_factor: int = 1) -> Tensor:
    """Class probabilities [K, D', H', W'] from a feature volume [C, D, H, W]."""
    if upsample_factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {upsample_factor}")
    if v.ndim != 4:
        raise ShapeError(f"occupancy head expects [C, D, H, W], got {v.shape}")
    logits = T.conv3d(T.reshape(v, (1,) + v.shape), weight, bias)
    if upsample_factor > 1:
        logits = T.upsample_trilinear(logits, upsample_factor)
    return T.softmax(logits, axis=1)[0]
