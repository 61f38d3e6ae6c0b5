"""Multi-task objective: face classification, box regression, landmark regression.

Within a batch the terms are summed (not averaged). Each sample carries a task
mask; a disabled term contributes exactly zero to both value and gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

PROB_EPS = 1e-12
TASKS = ("cls", "reg", "pts")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {value}")

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma)

    def for_task(self, task: str) -> float:
        return {"cls": self.alpha, "reg": self.beta, "pts": self.gamma}[task]


DEFAULT_WEIGHTS = {
    "net12": LossWeights(1.0, 0.5, 0.5),
    "net24": LossWeights(1.0, 0.5, 0.5),
    "net48": LossWeights(1.0, 0.5, 1.0),
}


def cls_loss(y: float, y_star: int) -> float:
    """Binary cross-entropy on the face probability ``y``."""
    if not 0.0 <= y <= 1.0:
        raise ContractError(f"probability outside [0, 1]: {y}")
    if y_star not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y_star}")
    y = min(max(y, PROB_EPS), 1.0 - PROB_EPS)
    return -(y_star * math.log(y) + (1 - y_star) * math.log(1.0 - y))


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise. Works on scalars and arrays."""
    a = np.abs(x)
    out = np.where(a < 1.0, 0.5 * np.square(x), a - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _vector_loss(pred, star, width):
    pred = np.asarray(pred, dtype=np.float64)
    if star is None:
        raise ContractError("regression target absent; the task must be masked out")
    star = np.asarray(star, dtype=np.float64)
    if pred.shape != (width,) or star.shape != (width,):
        raise ContractError(f"expected {width} components")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(star))):
        raise ContractError("non-finite regression values")
    return float(np.sum(smooth_l1(pred - star)))


def reg_loss(reg: Sequence[float], reg_star: Optional[Sequence[float]]) -> float:
    return _vector_loss(reg, reg_star, 4)


def pts_loss(pts: Sequence[float], pts_star: Optional[Sequence[float]]) -> float:
    return _vector_loss(pts, pts_star, 10)


@dataclass
class TaskLabels:
    """Ground truth for a batch of ``N`` samples.

    ``cls`` uses -1 for "absent"; ``reg``/``pts`` use NaN rows for absent.
    ``mask`` is ``(N, 3)`` booleans for (cls, reg, pts).
    """

    cls: np.ndarray
    reg: np.ndarray
    pts: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.cls)

    @classmethod
    def single(cls, cls_star=None, reg_star=None, pts_star=None, mask=None) -> "TaskLabels":
        c = np.array([-1 if cls_star is None else int(cls_star)], dtype=np.int64)
        r = np.full((1, 4), np.nan) if reg_star is None else np.asarray(reg_star, float)[None]
        p = np.full((1, 10), np.nan) if pts_star is None else np.asarray(pts_star, float)[None]
        if mask is None:
            mask = (cls_star is not None, reg_star is not None, pts_star is not None)
        return cls(c, r, p, np.asarray(mask, dtype=bool)[None])

    def subset(self, index) -> "TaskLabels":
        return TaskLabels(self.cls[index], self.reg[index], self.pts[index], self.mask[index])

    def validate(self):
        n = len(self.cls)
        if self.reg.shape != (n, 4) or self.pts.shape != (n, 10) or self.mask.shape != (n, 3):
            raise ContractError("label arrays disagree on batch size")
        present = np.stack([
            np.isin(self.cls, (0, 1)),
            np.all(np.isfinite(self.reg), axis=1),
            np.all(np.isfinite(self.pts), axis=1),
        ], axis=1)
        if np.any(self.mask & ~present):
            raise ContractError("task mask enables a loss whose label is absent")


@dataclass
class LossResult:
    total: float
    per_sample: np.ndarray
    grads: dict
    terms: dict


def multi_task_loss(heads: dict, labels: TaskLabels, weights: LossWeights,
                    keep: Optional[np.ndarray] = None) -> LossResult:
    """Weighted sum of the three task losses over a batch.

    ``heads`` needs ``cls_logits`` (N, 2), ``reg`` (N, 4), ``pts`` (N, 10).
    ``per_sample`` is each sample's weighted contribution before ``keep`` is
    applied; ``total`` and ``grads`` count only kept samples. ``grads['cls']``
    is the gradient with respect to the logits.
    """
    labels.validate()
    logits = np.asarray(heads["cls_logits"], dtype=np.float64)
    reg = np.asarray(heads["reg"], dtype=np.float64)
    pts = np.asarray(heads["pts"], dtype=np.float64)
    n = len(labels)
    if logits.shape != (n, 2) or reg.shape != (n, 4) or pts.shape != (n, 10):
        raise ContractError("head shapes do not match the label batch")
    mask = labels.mask
    alpha, beta, gamma = weights.as_tuple()

    # log-softmax, clamped the same way as the scalar loss
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = np.clip(log_p, math.log(PROB_EPS), math.log1p(-PROB_EPS))
    prob = np.exp(logits - logits.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    target = np.where(labels.cls == 1, 1, 0)
    l_cls = np.where(mask[:, 0], -log_p[np.arange(n), target], 0.0)
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), target] = 1.0
    g_cls = np.where(mask[:, :1], prob - onehot, 0.0)

    d_reg = np.where(mask[:, 1:2], reg - np.nan_to_num(labels.reg), 0.0)
    l_reg = np.where(mask[:, 1], smooth_l1(d_reg).sum(axis=1), 0.0)
    g_reg = np.where(mask[:, 1:2], smooth_l1_grad(d_reg), 0.0)

    d_pts = np.where(mask[:, 2:3], pts - np.nan_to_num(labels.pts), 0.0)
    l_pts = np.where(mask[:, 2], smooth_l1(d_pts).sum(axis=1), 0.0)
    g_pts = np.where(mask[:, 2:3], smooth_l1_grad(d_pts), 0.0)

    per_sample = alpha * l_cls + beta * l_reg + gamma * l_pts
    kept = np.ones(n, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    kcol = kept[:, None]
    grads = {
        "cls": np.where(kcol, alpha * g_cls, 0.0),
        "reg": np.where(kcol, beta * g_reg, 0.0),
        "pts": np.where(kcol, gamma * g_pts, 0.0),
    }
    terms = {
        "cls": float(l_cls[kept].sum()),
        "reg": float(l_reg[kept].sum()),
        "pts": float(l_pts[kept].sum()),
    }
    total = alpha * terms["cls"] + beta * terms["reg"] + gamma * terms["pts"]
    return LossResult(total=float(total), per_sample=per_sample, grads=grads, terms=terms)
