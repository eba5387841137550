"""Depth error statistics and semantic occupancy IoU."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import ShapeError
from .volume import DepthMap


@dataclass
class DepthMetricsReport:
    abs_rel: float
    abs: float
    sq_rel: float
    rmse: float
    th: dict[float, float]
    delta: dict[int, float]
    pixel_count: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["th"] = {_key(k): v for k, v in self.th.items()}
        d["delta"] = {str(k): v for k, v in self.delta.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _key(k: float) -> str:
    return str(int(k)) if float(k).is_integer() else repr(float(k))


def depth_metrics(pred: DepthMap, gt: DepthMap, th_thresholds=(8, 20), delta_powers=(1, 2, 3),
                  th_unit: float = 1e-3) -> DepthMetricsReport:
    """Error statistics over the ground truth's valid pixels.

    Th_k counts pixels whose absolute error exceeds ``k * th_unit`` in the depth
    unit (millimetres on metric depths by default).
    """
    p = pred.values.astype(np.float64)
    g = gt.values.astype(np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    mask = gt.mask
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    p, g = p[mask], g[mask]
    if np.any(g == 0):
        raise ValueError("ground truth has zero depth on a valid pixel")
    err = p - g
    ae = np.abs(err)
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(np.isfinite(ratio) & (p > 0), ratio, np.inf)
    return DepthMetricsReport(
        abs_rel=float(np.mean(ae / g)),
        abs=float(np.mean(ae)),
        sq_rel=float(np.mean(err ** 2 / g)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        th={k: float(np.mean(ae > k * th_unit)) for k in th_thresholds},
        delta={i: float(np.mean(ratio < 1.25 ** i)) for i in delta_powers},
        pixel_count=int(mask.sum()),
    )


def pool_depth_maps(maps: list[DepthMap]) -> DepthMap:
    """Concatenate several maps side by side so metrics average over all their pixels."""
    return DepthMap(np.concatenate([m.values.astype(np.float64) for m in maps], axis=1),
                    np.concatenate([m.mask for m in maps], axis=1))


@dataclass
class SemanticReport:
    iou: list[float]  # NaN for classes absent from both prediction and ground truth
    miou: float

    def to_dict(self) -> dict:
        return {"iou": [None if np.isnan(v) else v for v in self.iou], "miou": self.miou}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def semantic_metrics(pred_grid: np.ndarray, gt_grid: np.ndarray, num_classes: int,
                     ignore_index: int = 255) -> SemanticReport:
    pred_grid = np.asarray(pred_grid)
    gt_grid = np.asarray(gt_grid)
    if pred_grid.shape != gt_grid.shape:
        raise ShapeError(f"prediction {pred_grid.shape} and ground truth {gt_grid.shape} differ")
    keep = gt_grid != ignore_index
    if not keep.any():
        raise ValueError("every voxel is ignored")
    p = pred_grid[keep].astype(np.int64)
    g = gt_grid[keep].astype(np.int64)
    if p.min() < 0 or p.max() >= num_classes or g.min() < 0 or g.max() >= num_classes:
        raise ValueError(f"class index outside [0, {num_classes})")
    conf = np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = union > 0
    return SemanticReport([float(v) for v in iou], float(iou[present].mean()))
