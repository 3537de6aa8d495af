"""Grasp annotation readers and writers.

Supported inputs are Cornell rectangle files (four ``x y`` corner lines per
grasp), Jacquard grasp files (``x;y;theta_deg;opening;jaw_size``) and an
OCID_grasp-style directory.  Everything is normalized to
:class:`AnnotatedImage` and can be stored in a line-delimited JSON canonical
format, one image per line.

OCID_grasp directory layout read by :func:`parse_ocid_grasp`::

    <root>/classes.txt                      optional "id name" lines
    <root>/Annotations/<image_id>.txt       Cornell-style corner lines
    <root>/Annotations/<image_id>.labels    one class id per rectangle
    <root>/seg_mask_labels/<image_id>.png   label image (0 = background)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .codec import GraspCandidate
from .geometry import normalize_angle

CANONICAL_SCHEMA = "grasprefine/canonical-v1"
OCID_NUM_CLASSES = 31
CORNELL_SIZE = (640, 480)
JACQUARD_SIZE = (1024, 1024)


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ParseWarning:
    line: int
    message: str


@dataclass
class AnnotatedImage:
    image_id: str
    width: int
    height: int
    grasps: list = field(default_factory=list)
    negatives: Optional[list] = None
    segmentation: Optional[np.ndarray] = None
    class_names: Optional[dict] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        for g in list(self.grasps) + list(self.negatives or []):
            if not (0.0 <= g.x <= self.width and 0.0 <= g.y <= self.height):
                raise ValueError(f"{self.image_id}: grasp center ({g.x}, {g.y}) outside the image")
            if self.class_names is not None and g.class_id is not None and g.class_id not in self.class_names:
                raise ValueError(f"{self.image_id}: class id {g.class_id} not in the class table")
        if self.segmentation is not None:
            self.segmentation = np.asarray(self.segmentation)
            if self.segmentation.shape != (self.height, self.width):
                raise ValueError(f"{self.image_id}: mask shape {self.segmentation.shape} "
                                 f"does not match {self.height}x{self.width}")

    def grasps_by_class(self) -> dict:
        out = {}
        for g in self.grasps:
            out.setdefault(g.class_id, []).append(g)
        return out

    def __eq__(self, other):
        if not isinstance(other, AnnotatedImage):
            return NotImplemented
        same_mask = (self.segmentation is None and other.segmentation is None) or (
            self.segmentation is not None and other.segmentation is not None
            and np.array_equal(self.segmentation, other.segmentation))
        return (self.image_id, self.width, self.height, self.grasps, self.negatives, self.class_names) == \
            (other.image_id, other.width, other.height, other.grasps, other.negatives, other.class_names) \
            and same_mask


# --- Cornell --------------------------------------------------------------

def corners_to_grasp(p1, p2, p3, p4, class_id=None) -> GraspCandidate:
    """Convert four corners to a grasp.

    ``p1 -> p2`` is a gripper plate, so ``h = |p1 p2|``, ``w = |p2 p3|`` and
    ``theta`` is the direction of ``p2 -> p3`` (the opening axis).
    """
    pts = np.array([p1, p2, p3, p4], dtype=float)
    cx, cy = pts.mean(axis=0)
    h = float(np.hypot(*(pts[1] - pts[0])))
    dx, dy = pts[2] - pts[1]
    w = float(math.hypot(dx, dy))
    return GraspCandidate(float(cx), float(cy), w, h, math.atan2(dy, dx), class_id=class_id)


def grasp_to_corners(g: GraspCandidate) -> np.ndarray:
    """Inverse of :func:`corners_to_grasp`: plate edge first."""
    c, s = math.cos(g.theta), math.sin(g.theta)
    u = np.array([c, s]) * g.w / 2.0
    v = np.array([-s, c]) * g.h / 2.0
    center = np.array([g.x, g.y])
    return np.array([center - u - v, center - u + v, center + u + v, center + u - v])


def _read_points(text: str):
    points = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetFormatError(f"line {lineno}: expected 'x y', got {raw!r}")
        try:
            points.append((lineno, float(parts[0]), float(parts[1])))
        except ValueError:
            raise DatasetFormatError(f"line {lineno}: non-numeric corner {raw!r}") from None
    if len(points) % 4:
        raise DatasetFormatError(f"{len(points)} corner lines is not a multiple of 4")
    return points


def parse_cornell(text: str, class_ids=None):
    """Parse a Cornell rectangle file.

    Returns ``(grasps, warnings)``; groups containing NaN or with a
    degenerate edge are skipped and reported as warnings.
    """
    points = _read_points(text)
    grasps, warnings = [], []
    n_groups = len(points) // 4
    if class_ids is not None and len(class_ids) != n_groups:
        raise DatasetFormatError(f"{len(class_ids)} class labels for {n_groups} rectangles")
    for k in range(n_groups):
        group = points[4 * k:4 * k + 4]
        first_line = group[0][0]
        coords = [(x, y) for _, x, y in group]
        if any(math.isnan(v) for xy in coords for v in xy):
            warnings.append(ParseWarning(first_line, "NaN corner; rectangle skipped"))
            continue
        try:
            g = corners_to_grasp(*coords, class_id=None if class_ids is None else class_ids[k])
        except ValueError as exc:
            warnings.append(ParseWarning(first_line, f"degenerate rectangle skipped ({exc})"))
            continue
        grasps.append(g)
    return grasps, warnings


def export_cornell(grasps) -> str:
    lines = []
    for g in grasps:
        for x, y in grasp_to_corners(g):
            lines.append(f"{float(x)!r} {float(y)!r}")
    return "\n".join(lines) + ("\n" if lines else "")


# --- Jacquard -------------------------------------------------------------

def parse_jacquard(text: str):
    """Parse ``x;y;theta_deg;opening;jaw_size`` lines.

    Angles are stored counter-clockwise in a y-up frame and are negated to
    land in the y-down pixel frame.  Returns ``(grasps, warnings)``.
    """
    grasps, warnings = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(";")
        if len(parts) != 5:
            raise DatasetFormatError(f"line {lineno}: expected 5 ';'-separated fields, got {raw!r}")
        try:
            x, y, deg, opening, jaw = (float(p) for p in parts)
        except ValueError:
            raise DatasetFormatError(f"line {lineno}: non-numeric field in {raw!r}") from None
        if any(math.isnan(v) for v in (x, y, deg, opening, jaw)):
            warnings.append(ParseWarning(lineno, "NaN field; grasp skipped"))
            continue
        if opening <= 0 or jaw <= 0:
            raise DatasetFormatError(f"line {lineno}: non-positive grasp size")
        grasps.append(GraspCandidate(x, y, opening, jaw, normalize_angle(-math.radians(deg))))
    return grasps, warnings


def export_jacquard(grasps) -> str:
    lines = []
    for g in grasps:
        deg = math.degrees(normalize_angle(-g.theta))
        lines.append(f"{g.x!r};{g.y!r};{deg!r};{g.w!r};{g.h!r}")
    return "\n".join(lines) + ("\n" if lines else "")


# --- OCID_grasp -----------------------------------------------------------

def default_class_table() -> dict:
    return {i: f"class_{i:02d}" for i in range(1, OCID_NUM_CLASSES + 1)}


def read_class_table(path) -> dict:
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, name = line.partition(" ")
        try:
            table[int(key)] = name.strip() or f"class_{int(key):02d}"
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: bad class id {key!r}") from None
    return table


def load_mask(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def parse_ocid_grasp(root):
    """Read every image under an OCID_grasp-style directory.

    Returns ``(images, warnings)`` where warnings are ``(image_id,
    ParseWarning)`` pairs.
    """
    root = Path(root)
    ann_dir = root / "Annotations"
    if not ann_dir.is_dir():
        raise DatasetFormatError(f"{root}: missing Annotations directory")
    table_path = root / "classes.txt"
    table = read_class_table(table_path) if table_path.exists() else default_class_table()
    images, warnings = [], []
    for ann in sorted(ann_dir.glob("*.txt")):
        image_id = ann.stem
        label_path = ann.with_suffix(".labels")
        if not label_path.exists():
            raise DatasetFormatError(f"{image_id}: missing class labels {label_path.name}")
        try:
            labels = [int(v) for v in label_path.read_text().split()]
        except ValueError:
            raise DatasetFormatError(f"{label_path}: class labels must be integers") from None
        unknown = sorted({c for c in labels if c not in table})
        if unknown:
            raise DatasetFormatError(f"{image_id}: class ids {unknown} not in the class table")
        mask_path = root / "seg_mask_labels" / f"{image_id}.png"
        if not mask_path.exists():
            raise DatasetFormatError(f"{image_id}: missing segmentation mask {mask_path}")
        mask = load_mask(mask_path)
        try:
            grasps, warns = parse_cornell(ann.read_text(), class_ids=labels)
        except DatasetFormatError as exc:
            raise DatasetFormatError(f"{ann}: {exc}") from None
        warnings.extend((image_id, w) for w in warns)
        h, w = mask.shape[:2]
        images.append(AnnotatedImage(image_id, w, h, grasps, segmentation=mask, class_names=table))
    return images, warnings


# --- canonical format -----------------------------------------------------

class CanonicalFormatError(DatasetFormatError):
    pass


def _grasp_record(g: GraspCandidate) -> dict:
    return {"x": g.x, "y": g.y, "w": g.w, "h": g.h, "theta": g.theta,
            "class_id": g.class_id, "score": g.score}


def _rle(mask: np.ndarray) -> list:
    flat = mask.ravel()
    if flat.size == 0:
        return []
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], edges])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    out = []
    for s, n in zip(starts, lengths):
        out += [int(flat[s]), int(n)]
    return out


def _unrle(rle, shape) -> np.ndarray:
    values, counts = rle[0::2], rle[1::2]
    if len(values) != len(counts) or sum(counts) != shape[0] * shape[1]:
        raise ValueError("run lengths do not cover the mask")
    return np.repeat(np.array(values, dtype=np.int64), counts).reshape(shape)


def image_to_record(img: AnnotatedImage) -> dict:
    return {
        "schema": CANONICAL_SCHEMA,
        "image_id": img.image_id,
        "width": img.width,
        "height": img.height,
        "grasps": [_grasp_record(g) for g in img.grasps],
        "negatives": None if img.negatives is None else [_grasp_record(g) for g in img.negatives],
        "segmentation": None if img.segmentation is None else {
            "height": int(img.segmentation.shape[0]), "width": int(img.segmentation.shape[1]),
            "rle": _rle(img.segmentation)},
        "class_names": None if img.class_names is None else {str(k): v for k, v in sorted(img.class_names.items())},
    }


def _parse_grasp(rec) -> GraspCandidate:
    if not isinstance(rec, dict):
        raise ValueError("grasp entries must be objects")
    missing = {"x", "y", "w", "h", "theta"} - rec.keys()
    if missing:
        raise ValueError(f"grasp missing fields {sorted(missing)}")
    extra = rec.keys() - {"x", "y", "w", "h", "theta", "class_id", "score"}
    if extra:
        raise ValueError(f"unknown grasp fields {sorted(extra)}")
    cid = rec.get("class_id")
    return GraspCandidate(float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"]),
                          float(rec["theta"]), None if cid is None else int(cid), rec.get("score"))


def record_to_image(rec: dict) -> AnnotatedImage:
    if not isinstance(rec, dict):
        raise ValueError("record must be a JSON object")
    if rec.get("schema") != CANONICAL_SCHEMA:
        raise ValueError(f"schema must be {CANONICAL_SCHEMA!r}, got {rec.get('schema')!r}")
    for key in ("image_id", "width", "height", "grasps"):
        if key not in rec:
            raise ValueError(f"missing field {key!r}")
    seg = rec.get("segmentation")
    mask = None
    if seg is not None:
        mask = _unrle(seg["rle"], (int(seg["height"]), int(seg["width"])))
    names = rec.get("class_names")
    negatives = rec.get("negatives")
    return AnnotatedImage(
        str(rec["image_id"]), int(rec["width"]), int(rec["height"]),
        [_parse_grasp(g) for g in rec["grasps"]],
        None if negatives is None else [_parse_grasp(g) for g in negatives],
        mask,
        None if names is None else {int(k): v for k, v in names.items()},
    )


def dumps_canonical(images) -> str:
    return "".join(json.dumps(image_to_record(img), sort_keys=True) + "\n" for img in images)


def loads_canonical(text: str, source: str = "<string>") -> list:
    images = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            images.append(record_to_image(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise CanonicalFormatError(f"{source}:{lineno}: {exc}") from None
    return images


def write_canonical(path, images) -> None:
    Path(path).write_text(dumps_canonical(images))


def read_canonical(path) -> list:
    path = Path(path)
    return loads_canonical(path.read_text(), str(path))
