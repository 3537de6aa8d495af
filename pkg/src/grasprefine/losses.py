"""Training losses, each returning its value together with the analytic
gradient with respect to the prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HARD_NEGATIVE_FRACTION = 0.25


def smooth_l1(z):
    """Elementwise smooth-L1 value and derivative.

    Works on scalars and arrays; scalars come back as Python floats.
    """
    z_arr = np.asarray(z, dtype=float)
    a = np.abs(z_arr)
    quad = a < 1.0
    value = np.where(quad, 0.5 * z_arr * z_arr, a - 0.5)
    grad = np.where(quad, z_arr, np.sign(z_arr))
    if z_arr.ndim == 0:
        return float(value), float(grad)
    return value, grad


def _regression_loss(pred, target, size):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.shape[-1] != size:
        raise ValueError(f"expected matching (..., {size}) arrays, got {pred.shape} and {target.shape}")
    value, grad = smooth_l1(pred - target)
    value = np.asarray(value).sum(axis=-1)
    return (float(value) if value.ndim == 0 else value), np.asarray(grad)


def box_loss(pred, target):
    """Sum of smooth-L1 over the four box correction factors.

    Batched inputs of shape (N, 4) give a per-row loss vector.
    """
    return _regression_loss(pred, target, 4)


def refine_loss(pred, target):
    """Sum of smooth-L1 over the five refinement correction factors."""
    return _regression_loss(pred, target, 5)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=float)))


def rot_loss(logits, labels):
    """Orientation classification loss over a batch of proposals.

    ``logits`` has shape (N, n_classes + 1) with column 0 the invalid class;
    ``labels`` holds the ground-truth class per proposal (0 = invalid).  Both
    the valid and the invalid sums are normalized by the full batch size.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n = len(labels)
    if n == 0:
        raise ValueError("rot_loss needs a non-empty batch")
    if logits.shape[0] != n:
        raise ValueError("one label per logit row required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label outside the class range")
    logp = log_softmax(logits)
    rows = np.arange(n)
    value = -logp[rows, labels].sum() / n
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(value), grad / n


def hard_negative_weights(p_true: np.ndarray) -> np.ndarray:
    """Weights 4/(WH) on the worst-predicted quarter of the pixels, else 0.

    Pixels are ranked by ascending true-class probability, ties by ascending
    row-major index.  When W*H is not a multiple of 4 the pixel straddling
    the quarter mark gets the fractional remainder of the weight, so the
    weights always sum to exactly 1.
    """
    flat = p_true.reshape(-1)
    quota = HARD_NEGATIVE_FRACTION * flat.size
    n_full = int(np.floor(quota))
    weights = np.zeros(flat.size)
    order = np.argsort(flat, kind="stable")
    weights[order[:n_full]] = 4.0 / flat.size
    if quota > n_full:
        weights[order[n_full]] = 4.0 / flat.size * (quota - n_full)
    return weights.reshape(p_true.shape)


def seg_loss(prob, gt):
    """Hard-negative-mined per-pixel log loss.

    ``prob`` is an (H, W, S) probability map and ``gt`` an (H, W) grid of
    1-based class labels.  The gradient is with respect to the per-pixel
    logits that produced ``prob`` through a softmax over S.
    """
    prob = np.asarray(prob, dtype=float)
    gt = np.asarray(gt)
    if prob.ndim != 3 or prob.shape[:2] != gt.shape:
        raise ValueError(f"shape mismatch: probabilities {prob.shape}, labels {gt.shape}")
    s = prob.shape[2]
    if gt.min() < 1 or gt.max() > s:
        raise ValueError(f"labels must lie in 1..{s}")
    idx = (gt - 1).astype(int)
    p_true = np.take_along_axis(prob, idx[..., None], axis=2)[..., 0]
    if np.any(p_true <= 0):
        raise ValueError("probabilities of the true class must be positive")
    w = hard_negative_weights(p_true)
    value = float(-(w * np.log(p_true)).sum())
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=2)
    grad = w[..., None] * (prob - onehot)
    return value, grad


def seg_loss_from_logits(logits, gt):
    return seg_loss(softmax(np.asarray(logits, dtype=float)), gt)


@dataclass(frozen=True)
class LossWeights:
    lambda_grasp: float = 1.0
    lambda_sem: float = 0.8
    lambda_refine: float = 0.8

    def __post_init__(self):
        if min(self.lambda_grasp, self.lambda_sem, self.lambda_refine) < 0:
            raise ValueError("loss weights must be non-negative")


def grasp_loss(box: float, rot: float, rpn: float = 0.0) -> float:
    """Detection loss; the proposal-network term is supplied externally."""
    return rpn + box + rot


def composite_loss(grasp: float, sem: float, refine: float, w: LossWeights = LossWeights()) -> float:
    return w.lambda_grasp * grasp + w.lambda_sem * sem + w.lambda_refine * refine
