"""Procedural scenes: ray-cast depth, analytic context features, corrupted coarse costs.

A pinhole camera at the origin looks down +z (image rows grow along +y, i.e.
downward). The scene is a ground plane under the camera, an optional tilted
back wall, bounded panels, spheres, and axis-aligned boxes resting on the
ground. Depth is the z coordinate of the nearest hit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import DepthMap, HypothesisPlanes

FREE, GROUND, PLANE, SPHERE, BOX = range(5)
NUM_CLASSES = 5
IGNORE = 255
CONTEXT_CHANNELS = 3
SCALES = (1, 2, 4)


@dataclass(frozen=True)
class CorruptionSpec:
    occlusion_blocks: int = 0
    occlusion_size: int = 7
    noise_sigma: float = 0.0
    flatten_prob: float = 0.0

    def __post_init__(self):
        if self.occlusion_blocks < 0 or self.occlusion_size < 1:
            raise ValueError("occlusion blocks must be >= 0 with size >= 1")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be non-negative, got {self.noise_sigma}")
        if not 0 <= self.flatten_prob <= 1:
            raise ValueError(f"flatten probability must lie in [0, 1], got {self.flatten_prob}")


DEFAULT_CORRUPTION = CorruptionSpec(occlusion_blocks=4, occlusion_size=7, noise_sigma=0.35,
                                    flatten_prob=0.05)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    num_planes: int = 16  # depth hypotheses
    d_min: float = 2.0
    d_max: float = 10.0
    ground: bool = True
    walls: int = 2  # first is an unbounded back wall, the rest bounded panels
    spheres: int = 2
    boxes: int = 2
    cost_sharpness: float = 2.0
    corruption: CorruptionSpec = field(default_factory=lambda: DEFAULT_CORRUPTION)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got ({self.d_min}, {self.d_max})")
        if self.height < 1 or self.width < 1 or self.num_planes < 2:
            raise ValueError("image extents must be positive with at least two planes")
        if min(self.walls, self.spheres, self.boxes) < 0:
            raise ValueError("primitive counts must be non-negative")
        if isinstance(self.corruption, dict):
            object.__setattr__(self, "corruption", CorruptionSpec(**self.corruption))

    @property
    def planes(self) -> HypothesisPlanes:
        return HypothesisPlanes.uniform(self.d_min, self.d_max, self.num_planes)

    def with_seed(self, seed: int) -> "SceneConfig":
        d = asdict(self)
        d["seed"] = seed
        return SceneConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything except the seed, used to tie samples to a manifest."""
        d = asdict(self)
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SceneSample:
    gt_depth: DepthMap
    coarse_cost: np.ndarray  # [1, D, H, W]
    contexts: list[np.ndarray]  # [C', H/s, W/s] for s in SCALES
    semantic_grid: np.ndarray  # [D, H, W] class ids, IGNORE behind surfaces
    corrupted: np.ndarray  # [H, W] pixels touched by flattening
    planes: HypothesisPlanes


def _rays(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    f = float(w)
    u = (np.arange(w) - (w - 1) / 2) / f
    v = (np.arange(h) - (h - 1) / 2) / f
    return np.meshgrid(u, v)  # x, y with z = 1


class _Hits:
    """Running z-buffer with per-pixel class, albedo, and normal z-component."""

    def __init__(self, shape):
        self.depth = np.full(shape, np.inf)
        self.cls = np.zeros(shape, dtype=np.int64)
        self.albedo = np.zeros(shape)
        self.nz = np.zeros(shape)

    def add(self, s, cls, albedo, nz):
        s = np.where(np.isfinite(s) & (s > 1e-6), s, np.inf)
        closer = s < self.depth
        self.depth = np.where(closer, s, self.depth)
        self.cls = np.where(closer, cls, self.cls)
        self.albedo = np.where(closer, albedo, self.albedo)
        self.nz = np.where(closer, nz, self.nz)


def _plane_hit(x, y, normal, point):
    """Ray parameter of the hit with the plane through ``point``; rays are (x, y, 1)."""
    denom = normal[0] * x + normal[1] * y + normal[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.dot(normal, point) / denom
    return np.where(np.abs(denom) > 1e-9, s, np.inf)


def _sphere_hit(x, y, center, radius):
    dd = x * x + y * y + 1.0
    b = x * center[0] + y * center[1] + center[2]
    c = center @ center - radius ** 2
    disc = b * b - dd * c
    with np.errstate(invalid="ignore"):
        s = (b - np.sqrt(disc)) / dd
    s = np.where(disc >= 0, s, np.inf)
    nz = (s - center[2]) / radius
    return s, np.where(np.isfinite(s), nz, 0.0)


def _box_hit(x, y, lo, hi):
    dirs = (x, y, np.ones_like(x))
    t_near = np.full(x.shape, -np.inf)
    t_far = np.full(x.shape, np.inf)
    axis_near = np.zeros(x.shape, dtype=np.int64)
    for a in range(3):
        d = dirs[a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo[a] / d
            t2 = hi[a] / d
        tmin = np.where(d != 0, np.minimum(t1, t2), np.where((lo[a] <= 0) & (0 <= hi[a]), -np.inf, np.inf))
        tmax = np.where(d != 0, np.maximum(t1, t2), np.where((lo[a] <= 0) & (0 <= hi[a]), np.inf, -np.inf))
        axis_near = np.where(tmin > t_near, a, axis_near)
        t_near = np.maximum(t_near, tmin)
        t_far = np.minimum(t_far, tmax)
    hit = (t_near <= t_far) & (t_near > 0)
    nz = np.where(axis_near == 2, -1.0, 0.0)
    return np.where(hit, t_near, np.inf), nz


def render(config: SceneConfig, rng: np.random.Generator) -> tuple[DepthMap, np.ndarray, np.ndarray, np.ndarray]:
    """Depth map, class map, albedo map, and normal-z map for one random scene."""
    if not config.ground and config.walls + config.spheres + config.boxes == 0:
        raise ValueError("scene has no ground plane and no primitives")
    h, w = config.height, config.width
    x, y = _rays(h, w)
    hits = _Hits((h, w))
    span = config.d_max - config.d_min
    cam_h = rng.uniform(1.0, 1.5)

    if config.ground:
        hits.add(_plane_hit(x, y, np.array([0.0, 1.0, 0.0]), np.array([0.0, cam_h, 0.0])),
                 GROUND, rng.uniform(0.2, 1.0), 0.0)
    for i in range(config.walls):
        if i == 0:
            z0 = config.d_min + rng.uniform(0.6, 0.85) * span
            normal = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.1, 0.1), -1.0])
            s = _plane_hit(x, y, normal, np.array([0.0, 0.0, z0]))
        else:
            zc = config.d_min + rng.uniform(0.2, 0.6) * span
            xc = rng.uniform(-0.35, 0.35) * zc
            half_w = rng.uniform(0.5, 1.5)
            top = cam_h - rng.uniform(1.0, 2.5)
            yaw = rng.uniform(-0.6, 0.6)
            normal = np.array([np.sin(yaw), 0.0, -np.cos(yaw)])
            s = _plane_hit(x, y, normal, np.array([xc, 0.0, zc]))
            px, py, pz = s * x, s * y, s
            along = (px - xc) * np.cos(yaw) + (pz - zc) * np.sin(yaw)
            s = np.where((np.abs(along) <= half_w) & (py >= top) & (py <= cam_h), s, np.inf)
        nz = np.abs(normal[2]) / np.linalg.norm(normal)
        hits.add(s, PLANE, rng.uniform(0.2, 1.0), nz)
    for _ in range(config.spheres):
        r = rng.uniform(0.4, 1.0)
        zc = config.d_min + r + rng.uniform(0.5, 0.55 * span)
        center = np.array([rng.uniform(-0.35, 0.35) * zc, cam_h - r, zc])
        s, nz = _sphere_hit(x, y, center, r)
        hits.add(s, SPHERE, rng.uniform(0.2, 1.0), np.abs(nz))
    for _ in range(config.boxes):
        size = rng.uniform(0.5, 1.5, size=3)
        zc = config.d_min + 0.5 + rng.uniform(0.0, 0.5 * span)
        xc = rng.uniform(-0.35, 0.35) * zc
        lo = np.array([xc - size[0] / 2, cam_h - size[1], zc])
        hi = np.array([xc + size[0] / 2, cam_h, zc + size[2]])
        s, nz = _box_hit(x, y, lo, hi)
        hits.add(s, BOX, rng.uniform(0.2, 1.0), np.abs(nz))

    valid = np.isfinite(hits.depth)
    eps = 1e-3 * span
    depth = np.where(valid, np.clip(hits.depth, config.d_min + eps, config.d_max - eps), config.d_max - eps)
    return DepthMap(depth, valid), hits.cls, hits.albedo, hits.nz


def clean_cost(gt: DepthMap, planes: HypothesisPlanes, sharpness: float) -> np.ndarray:
    """Negative plane-distance costs in units of plane spacing; zero at invalid pixels."""
    d = gt.values
    dist = np.abs(planes.depths[:, None, None] - d[None]) / planes.mean_spacing
    cost = -sharpness * dist
    cost[:, ~gt.mask] = 0.0
    return cost[None].astype(np.float32)


def _blocks(spec: CorruptionSpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    s = min(spec.occlusion_size, h, w)
    for _ in range(spec.occlusion_blocks):
        r = rng.integers(0, h - s + 1)
        c = rng.integers(0, w - s + 1)
        mask[r:r + s, c:c + s] = True
    return mask


def corrupt_volume(cost: np.ndarray, spec: CorruptionSpec, seed: int,
                   return_mask: bool = False):
    """Flatten occlusion rectangles, add Gaussian noise, then flatten random pixels.

    Flattened pixels carry a constant cost (a uniform distribution after the
    softmax). With ``return_mask`` the pixels touched by either flattening are
    returned as well.
    """
    cost = np.asarray(cost)
    out = cost.copy()
    _, _, h, w = cost.shape
    rng = np.random.default_rng(seed)
    touched = np.zeros((h, w), dtype=bool)
    if spec.occlusion_blocks:
        occ = _blocks(spec, h, w, rng)
        out[:, :, occ] = 0.0
        touched |= occ
    if spec.noise_sigma:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape).astype(out.dtype)
    if spec.flatten_prob:
        flat = rng.random((h, w)) < spec.flatten_prob
        out[:, :, flat] = 0.0
        touched |= flat
    return (out, touched) if return_mask else out


def avg_pool2(a: np.ndarray) -> np.ndarray:
    c, h, w = a.shape
    return a.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def context_features(gt: DepthMap, albedo: np.ndarray, nz: np.ndarray,
                     planes: HypothesisPlanes) -> list[np.ndarray]:
    """Depth-gradient magnitude, albedo, and normal-z at full, half, and quarter resolution."""
    gy, gx = np.gradient(gt.values)
    grad = np.tanh(np.hypot(gx, gy) / planes.mean_spacing)
    full = np.stack([grad, albedo, nz]) * gt.mask
    full = full.astype(np.float32)
    out = [full]
    for _ in SCALES[1:]:
        out.append(avg_pool2(out[-1]))
    return out


def semantic_labels(gt: DepthMap, cls: np.ndarray, planes: HypothesisPlanes,
                    thickness: int = 2) -> np.ndarray:
    """Free space in front of the surface, the surface class for ``thickness`` planes, ignore behind."""
    d = len(planes)
    idx = planes.nearest_index(gt.values)
    k = np.arange(d)[:, None, None]
    grid = np.full((d,) + gt.shape, IGNORE, dtype=np.int64)
    grid[k < idx] = FREE
    surface = (k >= idx) & (k < idx + thickness)
    grid = np.where(surface, cls[None], grid)
    grid[:, ~gt.mask] = IGNORE
    return grid.astype(np.uint8)


def generate_scene(config: SceneConfig) -> SceneSample:
    h, w = config.height, config.width
    if h % 4 or w % 4:
        raise ValueError(f"image extents must be multiples of 4, got {h}x{w}")
    seq = np.random.SeedSequence(config.seed)
    scene_seed, noise_seed = seq.spawn(2)
    rng = np.random.default_rng(scene_seed)
    gt, cls, albedo, nz = render(config, rng)
    planes = config.planes
    cost = clean_cost(gt, planes, config.cost_sharpness)
    cost, touched = corrupt_volume(cost, config.corruption,
                                   int(noise_seed.generate_state(1)[0]), return_mask=True)
    _check_contract(cost, gt, planes, touched)
    return SceneSample(gt, cost, context_features(gt, albedo, nz, planes),
                       semantic_labels(gt, cls, planes), touched, planes)


def argmax_agreement(cost: np.ndarray, gt: DepthMap, planes: HypothesisPlanes,
                     pixels: np.ndarray | None = None) -> float:
    keep = gt.mask if pixels is None else gt.mask & pixels
    if not keep.any():
        return 1.0
    hit = np.argmax(cost[0], axis=0) == planes.nearest_index(gt.values)
    return float(hit[keep].mean())


def _check_contract(cost, gt, planes, touched) -> None:
    frac = argmax_agreement(cost, gt, planes, ~touched)
    if frac < 0.5:
        raise RuntimeError(f"coarse cost agrees with ground truth on only {frac:.2%} of "
                           "uncorrupted pixels; lower the noise level")
