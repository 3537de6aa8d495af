"""Jaccard-index grasp accuracy, its per-class variant, segmentation IoU and
threshold sweeps."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .codec import GraspCandidate, grasp_to_rect
from .geometry import angle_distance, axis_aligned_iou, rotated_iou

DEFAULT_IOUS = (0.25, 0.30, 0.35)
DEFAULT_ANGLES_DEG = (30, 25, 20, 15, 10, 5)


@dataclass(frozen=True)
class MetricConfig:
    iou_threshold: float = 0.25
    angle_threshold: float = math.pi / 6
    rotated_iou: bool = True
    top_k: int = 1

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.angle_threshold <= 0:
            raise ValueError("angle_threshold must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")


def grasp_iou(a: GraspCandidate, b: GraspCandidate, rotated: bool = True) -> float:
    ra, rb = grasp_to_rect(a), grasp_to_rect(b)
    return rotated_iou(ra, rb) if rotated else axis_aligned_iou(ra, rb)


def grasp_correct(pred: GraspCandidate, gts: Sequence[GraspCandidate],
                  cfg: MetricConfig = MetricConfig()) -> bool:
    """True if some ground truth is within the angle threshold and overlaps
    the prediction with IoU strictly above the IoU threshold."""
    if len(gts) == 0:
        raise ValueError("grasp_correct needs at least one ground-truth grasp")
    for gt in gts:
        if angle_distance(pred.theta, gt.theta) <= cfg.angle_threshold \
                and grasp_iou(pred, gt, cfg.rotated_iou) > cfg.iou_threshold:
            return True
    return False


def select_top(preds, k: int = 1) -> list:
    """Highest-score predictions first; equal scores keep list order."""
    if isinstance(preds, GraspCandidate):
        return [preds]
    ranked = sorted(enumerate(preds), key=lambda p: (-(p[1].score if p[1].score is not None else 0.0), p[0]))
    return [p for _, p in ranked[:k]]


def _image_correct(preds, gts, cfg) -> bool:
    top = select_top(preds, cfg.top_k)
    return bool(top) and any(grasp_correct(p, gts, cfg) for p in top)


def image_accuracy(preds: Sequence, gts: Sequence[Sequence[GraspCandidate]],
                   cfg: MetricConfig = MetricConfig(), jobs: int = 1) -> float:
    """Fraction of images whose top-scored prediction is correct.

    ``preds[i]`` is either a single grasp or the list of candidates for
    image ``i``; images with no candidates count as incorrect.
    """
    if len(preds) != len(gts):
        raise ValueError("one prediction entry per image required")
    if not preds:
        return 0.0
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            flags = list(pool.map(lambda a: _image_correct(a[0], a[1], cfg), zip(preds, gts)))
    else:
        flags = [_image_correct(p, g, cfg) for p, g in zip(preds, gts)]
    return sum(flags) / len(flags)


def center_label(g: GraspCandidate, mask: np.ndarray) -> Optional[int]:
    """Label of the pixel whose center is nearest the grasp center.

    Pixel ``(row, col)`` is centered at ``(col + 0.5, row + 0.5)``, so this is
    the pixel containing the point.  None when the center is off-image.
    """
    col = int(math.floor(g.x))
    row = int(math.floor(g.y))
    h, w = mask.shape
    if not (0 <= row < h and 0 <= col < w):
        return None
    return int(mask[row, col])


def per_class_accuracy(preds: Sequence[GraspCandidate], gts_by_class: Mapping[int, Sequence[GraspCandidate]],
                       seg_pred: np.ndarray, cfg: MetricConfig = MetricConfig(),
                       known_classes=None) -> dict:
    """Per-class correctness for one image.

    For each ground-truth class the best-scored candidate of that class whose
    center lies on the predicted mask of the class is evaluated against that
    class's ground truth.  Returns ``{class_id: 1.0 or 0.0}``.
    """
    seg_pred = np.asarray(seg_pred)
    if known_classes is not None:
        unknown = {c for c in gts_by_class if c not in known_classes}
        unknown |= {p.class_id for p in preds if p.class_id not in known_classes}
        if unknown:
            raise ValueError(f"unknown class ids {sorted(unknown)}")
    result = {}
    for cls, gts in gts_by_class.items():
        if not gts:
            continue
        qualifying = [p for p in preds if p.class_id == cls and center_label(p, seg_pred) == cls]
        top = select_top(qualifying, cfg.top_k)
        result[cls] = 1.0 if top and any(grasp_correct(p, gts, cfg) for p in top) else 0.0
    return result


def segmentation_iou(pred: np.ndarray, gt: np.ndarray, classes=None):
    """Per-class IoU and the mean over classes present in either mask.

    Classes absent from both masks map to ``None`` and are left out of the
    mean.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if classes is None:
        classes = sorted(set(np.unique(pred).tolist()) | set(np.unique(gt).tolist()))
    per_class = {}
    for c in classes:
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        per_class[int(c)] = np.count_nonzero(p & g) / union if union else None
    present = [v for v in per_class.values() if v is not None]
    mean = float(np.mean(present)) if present else float("nan")
    return per_class, mean


@dataclass
class SweepGrid:
    """Accuracies with rows indexed by angle thresholds (radians) and
    columns by IoU thresholds."""

    angles: list
    ious: list
    accuracy: np.ndarray

    def check_monotone(self) -> None:
        """Raise if accuracy increases as either threshold tightens."""
        a_order = np.argsort(self.angles)[::-1]  # loose -> tight
        i_order = np.argsort(self.ious)  # loose -> tight
        grid = self.accuracy[np.ix_(a_order, i_order)]
        if np.any(np.diff(grid, axis=0) > 1e-12) or np.any(np.diff(grid, axis=1) > 1e-12):
            raise AssertionError("sweep accuracy increases as a threshold tightens")

    def to_rows(self) -> list:
        rows = [["angle_deg"] + [f"iou_{v:g}" for v in self.ious]]
        for a, accs in zip(self.angles, self.accuracy):
            rows.append([f"{math.degrees(a):g}"] + [f"{v:.6f}" for v in accs])
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.to_rows())


def threshold_sweep(preds: Sequence, gts: Sequence[Sequence[GraspCandidate]], iou_list, angle_list,
                    rotated: bool = True, top_k: int = 1, jobs: int = 1) -> SweepGrid:
    if not len(iou_list) or not len(angle_list):
        raise ValueError("threshold lists must be non-empty")
    acc = np.zeros((len(angle_list), len(iou_list)))
    for i, a in enumerate(angle_list):
        for j, t in enumerate(iou_list):
            cfg = MetricConfig(iou_threshold=t, angle_threshold=a, rotated_iou=rotated, top_k=top_k)
            acc[i, j] = image_accuracy(preds, gts, cfg, jobs)
    grid = SweepGrid(list(map(float, angle_list)), list(map(float, iou_list)), acc)
    grid.check_monotone()
    return grid


@dataclass
class EvalReport:
    accuracy: float
    per_image: list
    config: MetricConfig
    sweep: Optional[SweepGrid] = None
    per_class: dict = field(default_factory=dict)
    segmentation: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "grasp_accuracy": self.accuracy,
            "n_images": len(self.per_image),
            "per_image": self.per_image,
            "config": {
                "iou_threshold": self.config.iou_threshold,
                "angle_threshold_deg": math.degrees(self.config.angle_threshold),
                "rotated_iou": self.config.rotated_iou,
                "top_k": self.config.top_k,
            },
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class.items())},
            "segmentation_iou": self.segmentation,
        }
        if self.sweep is not None:
            doc["sweep"] = {
                "angle_deg": [math.degrees(a) for a in self.sweep.angles],
                "iou": self.sweep.ious,
                "accuracy": self.sweep.accuracy.tolist(),
            }
        return json.dumps(doc, indent=2, sort_keys=True)
