"""Depth and disparity metrics, and disparity/depth conversion.

Depth metrics follow the usual monocular-depth protocol: ground truth outside
``(MIN_DEPTH, cap]`` is excluded, predictions are clamped into the same range,
and the seven standard numbers (Abs Rel, Sq Rel, RMS, Log RMS and three
``delta`` accuracies) are averaged over the remaining pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .imgproc import CameraRig

__all__ = [
    "MIN_DEPTH",
    "DISP_EPS",
    "DEFAULT_CAP",
    "DESK_RIG",
    "MetricsReport",
    "disparity_to_depth",
    "depth_to_disparity",
    "depth_metrics",
    "disparity_metrics",
    "evaluate_pair",
    "aggregate",
]

MIN_DEPTH = 1e-3
DISP_EPS = 1e-3
DEFAULT_CAP = 80.0

# virtual rig for the synthetic scenes: 2 px of disparity is 50 m, 24 px about 4 m
DESK_RIG = CameraRig(baseline_m=0.5, focal_px=200.0)


@dataclass
class MetricsReport:
    """Named scalar results; fields not computed by a metric stay ``nan``."""

    abs_rel: float = math.nan
    sq_rel: float = math.nan
    rms: float = math.nan
    log_rms: float = math.nan
    delta1: float = math.nan
    delta2: float = math.nan
    delta3: float = math.nan
    mae_px: float = math.nan
    bad1_frac: float = math.nan
    bad3_frac: float = math.nan
    valid_pixels: int = 0

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        """Fields of ``self``, with ``nan`` ones filled from ``other``."""
        out = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name == "valid_pixels":
                out[f.name] = max(a, b)
            else:
                out[f.name] = b if math.isnan(a) else a
        return MetricsReport(**out)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def disparity_to_depth(disp, rig: CameraRig, cap: float = DEFAULT_CAP) -> np.ndarray:
    """``baseline * focal / disp``; disparities at or below ``DISP_EPS`` map to ``cap``."""
    d = np.asarray(disp, dtype=np.float64)
    bf = rig.baseline_m * rig.focal_px
    safe = d > DISP_EPS
    return np.where(safe, bf / np.where(safe, d, 1.0), cap)


def depth_to_disparity(depth, rig: CameraRig) -> np.ndarray:
    z = np.asarray(depth, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    return rig.baseline_m * rig.focal_px / z


def depth_metrics(pred_depth, gt_depth, valid_mask=None, cap: float = DEFAULT_CAP) -> MetricsReport:
    """Depth error statistics over valid pixels with ground truth in ``(MIN_DEPTH, cap]``.

    Raises:
        ValueError: on shape mismatch or when no pixel survives the filtering.
    """
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth_metrics: shape mismatch {pred.shape} vs {gt.shape}")
    if cap <= MIN_DEPTH:
        raise ValueError(f"cap must exceed {MIN_DEPTH}, got {cap}")
    keep = np.isfinite(gt) & (gt > MIN_DEPTH) & (gt <= cap)
    if valid_mask is not None:
        valid = np.asarray(valid_mask)
        if valid.shape != gt.shape:
            raise ValueError(f"depth_metrics: mask shape {valid.shape} vs {gt.shape}")
        keep &= valid > 0
    n = int(keep.sum())
    if n == 0:
        raise ValueError("depth_metrics: no valid pixels")

    g = gt[keep]
    p = np.clip(pred[keep], MIN_DEPTH, cap)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rms=float(np.sqrt(np.mean(diff ** 2))),
        log_rms=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        valid_pixels=n,
    )


def disparity_metrics(pred, gt, valid_mask=None) -> MetricsReport:
    """Mean absolute disparity error and the fractions of pixels off by more than 1 and 3 px."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"disparity_metrics: shape mismatch {p.shape} vs {g.shape}")
    err = np.abs(p - g)
    if valid_mask is not None:
        err = err[np.asarray(valid_mask) > 0]
    if err.size == 0:
        raise ValueError("disparity_metrics: no valid pixels")
    return MetricsReport(
        mae_px=float(err.mean()),
        bad1_frac=float(np.mean(err > 1.0)),
        bad3_frac=float(np.mean(err > 3.0)),
        valid_pixels=int(err.size),
    )


def evaluate_pair(pred_disp, gt_disp, rig: CameraRig = DESK_RIG, cap: float = DEFAULT_CAP) -> MetricsReport:
    """Disparity metrics plus depth metrics of the converted maps."""
    dm = disparity_metrics(pred_disp, gt_disp)
    zm = depth_metrics(disparity_to_depth(pred_disp, rig, cap), disparity_to_depth(gt_disp, rig, cap),
                       cap=cap)
    return zm.merged(dm)


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Per-image mean of every field (``valid_pixels`` is summed)."""
    if not reports:
        raise ValueError("aggregate: empty report list")
    out = {}
    for key in MetricsReport.keys():
        vals = [getattr(r, key) for r in reports]
        out[key] = int(sum(vals)) if key == "valid_pixels" else float(np.mean(vals))
    return MetricsReport(**out)
