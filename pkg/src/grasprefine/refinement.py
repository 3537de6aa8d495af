"""Grasp refinement head.

Candidate grasps are fused with a segmentation probability map by cropping
the candidate's rectangle out of the map and stacking it with the whole map
resampled to the same size.  A two-layer MLP maps the stacked input to five
rotation-aware correction factors per candidate.
"""
from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codec import GraspCandidate, decode_refine_targets, encode_refine_targets, grasp_to_rect
from .geometry import OrientedRect
from .losses import refine_loss

N_OUTPUTS = 5
DEFAULT_CANDIDATES_PER_GRASP = 20
GRASPABLE_CHANNEL = 0
GRASPABLE_LABEL = 1
BACKGROUND_LABEL = 2

PARAMS_MAGIC = b"GRFH"
PARAMS_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class TrainingDiverged(RuntimeError):
    pass


# --- cropping -------------------------------------------------------------

def _sample(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray, padding: str) -> np.ndarray:
    """Bilinear samples of ``plane`` at continuous coordinates.

    Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``.
    """
    h, w = plane.shape
    fx = xs - 0.5
    fy = ys - 0.5
    if padding == "clamp":
        fx = np.clip(fx, 0.0, w - 1)
        fy = np.clip(fy, 0.0, h - 1)
    elif padding != "zero":
        raise ValueError(f"unknown padding {padding!r}")
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    ax = fx - x0
    ay = fy - y0

    def at(yy, xx):
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = plane[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside, vals, 0.0)

    return ((1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1))
            + ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1)))


def _lattice(region: OrientedRect, out_h: int, out_w: int):
    u = (np.arange(out_w) + 0.5) / out_w * region.w - region.w / 2.0
    v = (np.arange(out_h) + 0.5) / out_h * region.h - region.h / 2.0
    vv, uu = np.meshgrid(v, u, indexing="ij")
    c, s = math.cos(region.theta), math.sin(region.theta)
    xs = region.cx + uu * c - vv * s
    ys = region.cy + uu * s + vv * c
    return xs, ys


def bilinear_crop(prob_map: np.ndarray, region: OrientedRect, out_h: int, out_w: int,
                  channel: int = GRASPABLE_CHANNEL, padding: str = "clamp") -> np.ndarray:
    """Resample ``region`` of one map channel onto an ``out_h x out_w`` grid.

    Output columns run along the region's ``w`` axis and rows along ``h``.
    Samples falling outside the map take the border value (``padding="clamp"``)
    or zero (``padding="zero"``).
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be at least 1")
    prob_map = np.asarray(prob_map, dtype=float)
    plane = prob_map if prob_map.ndim == 2 else prob_map[:, :, channel]
    h, w = plane.shape
    if not (0.0 <= region.cx <= w and 0.0 <= region.cy <= h):
        raise ValueError(f"region center ({region.cx:.2f}, {region.cy:.2f}) outside the {w}x{h} map")
    xs, ys = _lattice(region, out_h, out_w)
    return _sample(plane, xs, ys, padding)


def _bounding_region(g: GraspCandidate) -> OrientedRect:
    r = grasp_to_rect(g)
    c, s = abs(math.cos(r.theta)), abs(math.sin(r.theta))
    return OrientedRect(r.cx, r.cy, r.w * c + r.h * s, r.w * s + r.h * c, 0.0)


def build_refine_input(prob_map: np.ndarray, candidates: Sequence[GraspCandidate],
                       crop_h: int = 14, crop_w: int = 14, channel: int = GRASPABLE_CHANNEL,
                       rotated: bool = True, padding: str = "clamp") -> np.ndarray:
    """Stack (candidate crop, whole map) into an (N, 2, crop_h, crop_w) array.

    With ``rotated=False`` the crop covers the candidate's axis-aligned
    bounding box instead of the rotated rectangle.
    """
    if len(candidates) == 0:
        raise ValueError("at least one candidate is required")
    prob_map = np.asarray(prob_map, dtype=float)
    h, w = prob_map.shape[:2]
    full = bilinear_crop(prob_map, OrientedRect(w / 2.0, h / 2.0, w, h, 0.0), crop_h, crop_w,
                         channel, padding)
    out = np.empty((len(candidates), 2, crop_h, crop_w))
    for i, g in enumerate(candidates):
        region = grasp_to_rect(g) if rotated else _bounding_region(g)
        out[i, 0] = bilinear_crop(prob_map, region, crop_h, crop_w, channel, padding)
        out[i, 1] = full
    return out


# --- MLP ------------------------------------------------------------------

@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    slope: float = 0.01
    step: int = 0

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                         self.slope, self.step)

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, slope: float = 0.01) -> "MlpParams":
        return cls(np.zeros((d_in, d_hidden)), np.zeros(d_hidden),
                   np.zeros((d_hidden, N_OUTPUTS)), np.zeros(N_OUTPUTS), slope)


def init_params(d_in: int, d_hidden: int = 64, seed: int = 0, slope: float = 0.01) -> MlpParams:
    """Uniform init with bound 1/sqrt(fan_in) per layer."""
    rng = np.random.default_rng(seed)
    b1_bound = 1.0 / math.sqrt(d_in)
    b2_bound = 1.0 / math.sqrt(d_hidden)
    return MlpParams(
        rng.uniform(-b1_bound, b1_bound, (d_in, d_hidden)),
        rng.uniform(-b1_bound, b1_bound, d_hidden),
        rng.uniform(-b2_bound, b2_bound, (d_hidden, N_OUTPUTS)),
        rng.uniform(-b2_bound, b2_bound, N_OUTPUTS),
        slope,
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    params_id: int
    step: int


def mlp_forward(params: MlpParams, inputs: np.ndarray):
    """Return (N, 5) raw correction factors and the cache for backprop."""
    x = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    if x.shape[1] != params.d_in:
        raise ValueError(f"input dimension {x.shape[1]} does not match d_in={params.d_in}")
    pre = x @ params.w1 + params.b1
    hidden = np.where(pre > 0, pre, params.slope * pre)
    out = hidden @ params.w2 + params.b2
    return out, ForwardCache(x, pre, hidden, id(params), params.step)


def mlp_backward(params: MlpParams, cache: ForwardCache, grad_out: np.ndarray) -> dict:
    if cache.params_id != id(params) or cache.step != params.step:
        raise ValueError("stale forward cache: parameters changed since the forward pass")
    grad_out = np.asarray(grad_out, dtype=float)
    if grad_out.shape != (cache.x.shape[0], N_OUTPUTS):
        raise ValueError(f"expected output gradient of shape {(cache.x.shape[0], N_OUTPUTS)}")
    g_hidden = grad_out @ params.w2.T
    g_pre = g_hidden * np.where(cache.pre > 0, 1.0, params.slope)
    return {
        "w1": cache.x.T @ g_pre,
        "b1": g_pre.sum(axis=0),
        "w2": cache.hidden.T @ grad_out,
        "b2": grad_out.sum(axis=0),
    }


def batch_refine_loss(params: MlpParams, inputs: np.ndarray, targets: np.ndarray):
    """Mean refinement loss over a batch and its parameter gradients."""
    out, cache = mlp_forward(params, inputs)
    values, g = refine_loss(out, targets)
    n = len(out)
    return float(np.mean(values)), mlp_backward(params, cache, g / n)


# --- synthetic scenes -----------------------------------------------------

@dataclass(frozen=True)
class Noise:
    """Half-ranges of the uniform perturbation applied to candidates."""

    xy: float = 5.0
    w: float = 4.0
    h: float = 4.0
    theta: float = math.radians(35.0)


@dataclass
class SyntheticScene:
    prob_map: np.ndarray
    gts: list
    candidates: list
    mask: np.ndarray
    pairs: list = field(default_factory=list)

    def targets(self) -> np.ndarray:
        return np.array([encode_refine_targets(c, self.gts[j])
                         for c, j in zip(self.candidates, self.pairs)]).reshape(-1, N_OUTPUTS)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def generate_synthetic_scenes(count: int, seed: int = 0, noise: Noise = Noise(), size: int = 96,
                              max_objects: int = 5, candidates_per_grasp: int = DEFAULT_CANDIDATES_PER_GRASP,
                              edge_sharpness: float = 1.5) -> list:
    """Desk-scale stand-ins for network outputs.

    Each scene holds 1-5 soft rectangles or ellipses as the graspable
    probability, one ground-truth grasp per object (opening across the
    short axis) and candidates drawn by perturbing the ground truth.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    scenes = []
    for _ in range(count):
        n_obj = int(rng.integers(1, max_objects + 1))
        placed = []
        free = np.ones((size, size))
        for _attempt in range(60):
            if len(placed) == n_obj:
                break
            length = rng.uniform(24.0, 40.0)
            width = rng.uniform(10.0, 16.0)
            phi = rng.uniform(0.0, math.pi)
            reach = length / 2.0 + 6.0
            cx, cy = rng.uniform(reach, size - reach, 2)
            if any(math.hypot(cx - p[0], cy - p[1]) < reach + p[4] for p in placed):
                continue
            kind = "rect" if rng.random() < 0.5 else "ellipse"
            c, s = math.cos(phi), math.sin(phi)
            along = (xs - cx) * c + (ys - cy) * s
            across = -(xs - cx) * s + (ys - cy) * c
            if kind == "rect":
                p = (_sigmoid(edge_sharpness * (length / 2 - np.abs(along)))
                     * _sigmoid(edge_sharpness * (width / 2 - np.abs(across))))
            else:
                r = np.sqrt((along / (length / 2)) ** 2 + (across / (width / 2)) ** 2)
                p = _sigmoid(edge_sharpness * (1.0 - r) * width / 2)
            free *= 1.0 - p
            placed.append((cx, cy, length, width, reach, phi))
        graspable = np.clip(1.0 - free, 1e-4, 1.0 - 1e-4)
        prob = np.stack([graspable, 1.0 - graspable], axis=-1)
        mask = np.where(graspable >= 0.5, GRASPABLE_LABEL, BACKGROUND_LABEL)

        gts, cands, pairs = [], [], []
        for cx, cy, length, width, _reach, phi in placed:
            gt = GraspCandidate(cx, cy, width + 8.0, 0.8 * length, phi + math.pi / 2)
            gts.append(gt)
            for _k in range(candidates_per_grasp):
                d = rng.uniform(-1.0, 1.0, 5)
                cands.append(GraspCandidate(
                    gt.x + d[0] * noise.xy, gt.y + d[1] * noise.xy,
                    max(1.0, gt.w + d[2] * noise.w), max(1.0, gt.h + d[3] * noise.h),
                    gt.theta + d[4] * noise.theta))
                pairs.append(len(gts) - 1)
        scenes.append(SyntheticScene(prob, gts, cands, mask, pairs))
    return scenes


# --- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    epochs: int = 400
    batch_size: int = 32
    seed: int = 0
    hidden: int = 64
    crop_h: int = 14
    crop_w: int = 14
    weight_decay: float = 0.0
    rotated_crop: bool = True
    standardize: bool = True
    jobs: int = 1


@dataclass
class TrainResult:
    params: MlpParams
    curve: list  # (epoch, mean loss); epoch 0 is the initial loss


def scenes_to_arrays(scenes: Sequence[SyntheticScene], crop_h: int = 14, crop_w: int = 14,
                     rotated: bool = True):
    inputs, targets = [], []
    for sc in scenes:
        if not sc.candidates:
            continue
        inputs.append(build_refine_input(sc.prob_map, sc.candidates, crop_h, crop_w, rotated=rotated))
        targets.append(sc.targets())
    return np.concatenate(inputs), np.concatenate(targets)


def _accumulate(params, x, t, jobs):
    if jobs <= 1 or len(x) < 2 * jobs:
        return batch_refine_loss(params, x, t)
    chunks = np.array_split(np.arange(len(x)), jobs)

    def work(idx):
        out, cache = mlp_forward(params, x[idx])
        values, g = refine_loss(out, t[idx])
        return float(values.sum()), mlp_backward(params, cache, g / len(x))

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(work, chunks))
    # fixed reduction order keeps results independent of thread timing
    grads = {k: sum(p[1][k] for p in parts) for k in parts[0][1]}
    return sum(p[0] for p in parts) / len(x), grads


def train_refine_head(scenes: Sequence[SyntheticScene], config: TrainConfig = TrainConfig(),
                      params: Optional[MlpParams] = None, progress=None) -> TrainResult:
    """Minimize the mean refinement loss over all scene candidates with
    (Nesterov) momentum SGD."""
    if len(scenes) == 0:
        raise ValueError("no training scenes")
    x, t = scenes_to_arrays(scenes, config.crop_h, config.crop_w, config.rotated_crop)
    x = x.reshape(len(x), -1)
    mean, scale = np.zeros(x.shape[1]), np.ones(x.shape[1])
    if config.standardize:
        # optimize on standardized inputs; the affine map is folded into layer 1 on return
        mean, scale = x.mean(axis=0), np.maximum(x.std(axis=0), 0.05)
        x = (x - mean) / scale
    if params is None:
        params = init_params(x.shape[1], config.hidden, config.seed)
    else:
        params = params.copy()
        params.b1 = params.b1 + mean @ params.w1
        params.w1 = params.w1 * scale[:, None]
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.arrays().items()}

    def full_loss():
        out, _ = mlp_forward(params, x)
        return float(np.mean(refine_loss(out, t)[0]))

    curve = [(0, full_loss())]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = _accumulate(params, x[idx], t[idx], config.jobs)
            for name, arr in params.arrays().items():
                g = grads[name]
                if config.weight_decay:
                    g = g + config.weight_decay * arr
                v = velocity[name]
                v *= config.momentum
                v += g
                step = g + config.momentum * v if config.nesterov else v
                arr -= config.lr * step
            params.step += 1
        loss = full_loss()
        if not math.isfinite(loss) or loss > 1e6:
            raise TrainingDiverged(f"loss {loss:.3g} at epoch {epoch}")
        curve.append((epoch, loss))
        if progress is not None:
            progress(epoch, loss)
    params.w1 = params.w1 / scale[:, None]
    params.b1 = params.b1 - mean @ params.w1
    return TrainResult(params, curve)


def refine_candidates(params: MlpParams, prob_map: np.ndarray, candidates: Sequence[GraspCandidate],
                      crop_h: int = 14, crop_w: int = 14, rotated: bool = True) -> list:
    """Apply the head and decode the refined grasps."""
    if not candidates:
        return []
    x = build_refine_input(prob_map, candidates, crop_h, crop_w, rotated=rotated)
    out, _ = mlp_forward(params, x)
    return [decode_refine_targets(g, t) for g, t in zip(candidates, out)]


# --- serialization --------------------------------------------------------

def save_params(path, params: MlpParams) -> None:
    """Write a 16-byte header followed by little-endian doubles:
    w1 (row-major), b1, w2 (row-major), b2, leaky slope."""
    body = np.concatenate([params.w1.ravel(), params.b1, params.w2.ravel(), params.b2,
                           [params.slope]]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, params.d_in, params.d_hidden))
        fh.write(body.tobytes())


def load_params(path) -> MlpParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise ValueError("params file too short for header")
    magic, version, d_in, d_hidden = _HEADER.unpack_from(data)
    if magic != PARAMS_MAGIC:
        raise ValueError(f"bad params magic {magic!r}")
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported params version {version}")
    expected = d_in * d_hidden + d_hidden + d_hidden * N_OUTPUTS + N_OUTPUTS + 1
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != expected:
        raise ValueError(f"params body has {body.size} values, expected {expected}")
    body = body.astype(float)
    i = 0

    def take(n):
        nonlocal i
        chunk = body[i:i + n]
        i += n
        return chunk

    w1 = take(d_in * d_hidden).reshape(d_in, d_hidden)
    b1 = take(d_hidden)
    w2 = take(d_hidden * N_OUTPUTS).reshape(d_hidden, N_OUTPUTS)
    b2 = take(N_OUTPUTS)
    return MlpParams(w1, b1, w2, b2, float(take(1)[0]))


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in curve:
            writer.writerow([epoch, repr(float(loss))])
