"""Grasp candidates, region proposals and their regression targets.

Two target parameterizations are supported: box targets relative to an
axis-aligned region proposal, and rotation-aware refinement targets relative
to a previously predicted grasp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import OrientedRect, normalize_angle

INVALID_CLASS = 0


@dataclass(frozen=True)
class GraspCandidate:
    """Oriented grasp rectangle ``(x, y, w, h, theta)``.

    ``w`` is the gripper opening width, ``h`` the plate length and ``theta``
    the direction of the opening axis, normalized into ``[0, pi)``.
    """

    x: float
    y: float
    w: float
    h: float
    theta: float
    class_id: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        for name in ("x", "y", "w", "h", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"extents must be positive, got w={self.w} h={self.h}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h, self.theta])

    def replace(self, **changes) -> "GraspCandidate":
        fields = dict(x=self.x, y=self.y, w=self.w, h=self.h, theta=self.theta,
                      class_id=self.class_id, score=self.score)
        fields.update(changes)
        return GraspCandidate(**fields)


@dataclass(frozen=True)
class RegionProposal:
    x_hat: float
    y_hat: float
    w_hat: float
    h_hat: float

    def __post_init__(self):
        if self.w_hat <= 0 or self.h_hat <= 0:
            raise ValueError("proposal extents must be positive")


@dataclass(frozen=True)
class OrientationBins:
    """``n_classes`` equal-width, left-closed orientation intervals over [0, pi).

    Class 0 is reserved for an invalid proposal; orientations use 1..n.
    """

    n_classes: int = 18

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")

    @property
    def width(self) -> float:
        return math.pi / self.n_classes


def orientation_to_class(theta: float, bins: OrientationBins = OrientationBins()) -> int:
    if not 0.0 <= theta < math.pi:
        raise ValueError(f"theta must lie in [0, pi), got {theta}")
    q = theta * bins.n_classes / math.pi
    # snap rounding noise so a boundary angle lands in the upper bin
    if abs(q - round(q)) < 1e-12:
        q = round(q)
    c = int(math.floor(q)) + 1
    return min(c, bins.n_classes)


def class_to_orientation(c: int, bins: OrientationBins = OrientationBins()) -> float:
    if c == INVALID_CLASS:
        raise ValueError("the invalid class has no orientation")
    if not 1 <= c <= bins.n_classes:
        raise ValueError(f"class {c} outside 1..{bins.n_classes}")
    return (c - 0.5) * bins.width


def encode_box_targets(proposal: RegionProposal, gt: GraspCandidate) -> np.ndarray:
    """Return ``(t_x, t_y, t_w, t_h)`` mapping ``proposal`` onto ``gt``."""
    return np.array([
        (gt.x - proposal.x_hat) / proposal.w_hat,
        (gt.y - proposal.y_hat) / proposal.h_hat,
        math.log(gt.w / proposal.w_hat),
        math.log(gt.h / proposal.h_hat),
    ])


def decode_box_targets(proposal: RegionProposal, t, theta_class: int,
                       bins: OrientationBins = OrientationBins()) -> GraspCandidate:
    tx, ty, tw, th = (float(v) for v in t)
    return GraspCandidate(
        x=proposal.x_hat + tx * proposal.w_hat,
        y=proposal.y_hat + ty * proposal.h_hat,
        w=proposal.w_hat * math.exp(tw),
        h=proposal.h_hat * math.exp(th),
        theta=class_to_orientation(theta_class, bins),
    )


def encode_refine_targets(g: GraspCandidate, gt: GraspCandidate) -> np.ndarray:
    """Rotation-aware targets ``(t_x, t_y, t_w, t_h, t_theta)`` of ``gt``
    expressed in the frame of the prior grasp ``g``; ``t_theta`` lies in [0, 1)."""
    c, s = math.cos(g.theta), math.sin(g.theta)
    dx, dy = gt.x - g.x, gt.y - g.y
    t_theta = math.fmod(gt.theta - g.theta, math.pi)
    if t_theta < 0.0:
        t_theta += math.pi
    t_theta /= math.pi
    if t_theta >= 1.0:
        t_theta = 0.0
    return np.array([
        (dx * c + dy * s) / g.w,
        (dy * c - dx * s) / g.h,
        math.log(gt.w / g.w),
        math.log(gt.h / g.h),
        t_theta,
    ])


def decode_refine_targets(g: GraspCandidate, t) -> GraspCandidate:
    tx, ty, tw, th, tt = (float(v) for v in t)
    c, s = math.cos(g.theta), math.sin(g.theta)
    u, v = tx * g.w, ty * g.h
    return g.replace(
        x=g.x + u * c - v * s,
        y=g.y + u * s + v * c,
        w=g.w * math.exp(tw),
        h=g.h * math.exp(th),
        theta=normalize_angle(g.theta + math.pi * tt),
    )


def grasp_to_rect(g: GraspCandidate) -> OrientedRect:
    return OrientedRect(g.x, g.y, g.w, g.h, g.theta)
