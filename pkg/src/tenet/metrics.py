"""Mask quality metrics: region overlap J, boundary agreement F, and the
frame -> video -> dataset aggregation used for reporting.

J is plain mask IoU. F matches boundary pixels between prediction and
ground truth within a Euclidean tolerance radius (default
ceil(0.008 * image diagonal)) and combines the resulting precision and
recall into an F-measure. Frames average within a video; videos average
unweighted into dataset numbers; JF is always the midpoint of J and F.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import CoverageError, ShapeError, ValidationError
from .geometry import BoxSequence, box_miou
from .io import MaskRaster

__all__ = ["region_j", "contour_f", "boundary_mask", "evaluate", "EvalReport"]

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, MaskRaster) else np.asarray(mask, dtype=bool)


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _bits(pred), _bits(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def region_j(pred, gt) -> float:
    """Mask IoU. Two empty masks count as perfect agreement (1.0)."""
    p, g = _check_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(p, g).sum()
    return float(inter) / float(union)


def boundary_mask(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbor outside the mask; pixels
    beyond the image border count as outside."""
    bits = _bits(mask)
    eroded = ndimage.binary_erosion(bits, structure=_CROSS, border_value=0)
    return bits & ~eroded


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def default_tolerance(width: int, height: int) -> int:
    """ceil(0.008 * image diagonal), the conventional boundary tolerance."""
    return int(math.ceil(0.008 * math.hypot(width, height)))


def contour_f(pred, gt, tolerance_radius: int | None = None) -> float:
    """Boundary F-measure with disk-tolerance matching.

    Precision is the share of predicted boundary pixels within
    tolerance_radius (Euclidean) of the ground-truth boundary; recall the
    converse. Returns 2PR/(P+R), 1.0 when both masks are empty, 0.0 when
    exactly one is.
    """
    p, g = _check_pair(pred, gt)
    if tolerance_radius is None:
        tolerance_radius = default_tolerance(p.shape[1], p.shape[0])
    if tolerance_radius < 0:
        raise ValidationError(f"tolerance_radius must be >= 0, got {tolerance_radius}")
    p_empty, g_empty = not p.any(), not g.any()
    if p_empty and g_empty:
        return 1.0
    if p_empty or g_empty:
        return 0.0
    pb = boundary_mask(p)
    gb = boundary_mask(g)
    disk = _disk(tolerance_radius)
    gb_zone = ndimage.binary_dilation(gb, structure=disk)
    pb_zone = ndimage.binary_dilation(pb, structure=disk)
    precision = float((pb & gb_zone).sum()) / float(pb.sum())
    recall = float((gb & pb_zone).sum()) / float(gb.sum())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class VideoScores:
    j: float
    f: float
    jf: float
    box_miou: float | None = None


@dataclass(frozen=True)
class EvalReport:
    """Per-video and dataset-level metric summary."""

    per_video: dict[str, VideoScores]
    j_mean: float
    f_mean: float
    jf_mean: float
    box_miou_mean: float | None = None
    n_videos: int = 0
    n_frames: int = 0
    extras: dict = field(default_factory=dict)


def evaluate(
    pred_masks: dict[str, dict[int, MaskRaster]],
    gt_masks: dict[str, dict[int, MaskRaster]],
    pred_boxes: dict[str, BoxSequence] | None = None,
    gt_boxes: dict[str, BoxSequence] | None = None,
    tolerance_radius: int | None = None,
) -> EvalReport:
    """Score predictions against ground truth.

    Masks are keyed video -> frame. Every ground-truth frame must be
    predicted (missing keys raise CoverageError naming them). Box mIoU is
    included per video when both box mappings are supplied.
    """
    if not gt_masks:
        raise ValidationError("no ground-truth videos to evaluate")
    missing = []
    for video, frames in gt_masks.items():
        if video not in pred_masks:
            missing.extend((video, t) for t in sorted(frames))
            continue
        missing.extend((video, t) for t in sorted(set(frames) - set(pred_masks[video])))
    if missing:
        raise CoverageError(f"missing predictions for {missing[:10]}" + ("..." if len(missing) > 10 else ""))

    per_video: dict[str, VideoScores] = {}
    total_frames = 0
    for video in sorted(gt_masks):
        frames = sorted(gt_masks[video])
        j_vals, f_vals = [], []
        for t in frames:
            pred, gt = pred_masks[video][t], gt_masks[video][t]
            j_vals.append(region_j(pred, gt))
            f_vals.append(contour_f(pred, gt, tolerance_radius=tolerance_radius))
        total_frames += len(frames)
        j_v, f_v = float(np.mean(j_vals)), float(np.mean(f_vals))
        miou = None
        if pred_boxes is not None and gt_boxes is not None and video in gt_boxes:
            if video not in pred_boxes:
                raise CoverageError(f"missing predicted boxes for video {video!r}")
            miou = box_miou(pred_boxes[video], gt_boxes[video])
        per_video[video] = VideoScores(j_v, f_v, (j_v + f_v) / 2.0, miou)

    j_mean = float(np.mean([v.j for v in per_video.values()]))
    f_mean = float(np.mean([v.f for v in per_video.values()]))
    mious = [v.box_miou for v in per_video.values() if v.box_miou is not None]
    return EvalReport(
        per_video=per_video,
        j_mean=j_mean,
        f_mean=f_mean,
        jf_mean=(j_mean + f_mean) / 2.0,
        box_miou_mean=float(np.mean(mious)) if mious else None,
        n_videos=len(per_video),
        n_frames=total_frames,
    )
