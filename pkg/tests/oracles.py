"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the vectorized code paths it checks.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b, stride=1):
    """x (C,H,W), w (O,C,kh,kw): plain nested-loop cross-correlation."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for k in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[k, i, j] = float(np.sum(patch * w[k])) + b[k]
    return out


def maxpool_loops(x, window, stride):
    c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ch, i, j] = x[ch, i * stride:i * stride + window,
                                  j * stride:j * stride + window].max()
    return out


def iou_scalar(a, b):
    ax2, ay2, bx2, by2 = a[0] + a[2], a[1] + a[3], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def min_overlap_scalar(a, b):
    ax2, ay2, bx2, by2 = a[0] + a[2], a[1] + a[3], b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    return iw * ih / min(a[2] * a[3], b[2] * b[3])


def iou_raster(a, b):
    """IoU of integer boxes by counting covered unit pixels on a grid."""
    x0 = int(min(a[0], b[0]))
    y0 = int(min(a[1], b[1]))
    x1 = int(max(a[0] + a[2], b[0] + b[2]))
    y1 = int(max(a[1] + a[3], b[1] + b[3]))
    ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
    ina = (xs >= a[0]) & (xs < a[0] + a[2]) & (ys >= a[1]) & (ys < a[1] + a[3])
    inb = (xs >= b[0]) & (xs < b[0] + b[2]) & (ys >= b[1]) & (ys < b[1] + b[3])
    union = np.sum(ina | inb)
    return float(np.sum(ina & inb)) / float(union) if union else 0.0


def nms_reference(boxes, scores, threshold, mode="union"):
    """O(n^2) greedy NMS over a Python list, one pass per kept box."""
    overlap = iou_scalar if mode == "union" else min_overlap_scalar
    idx = list(range(len(scores)))
    # selection sort by (-score, index)
    remaining = sorted(idx, key=lambda i: (-scores[i], i))
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [i for i in remaining if overlap(boxes[best], boxes[i]) <= threshold]
    return keep


def match_reference(det_boxes, det_scores, gt_boxes, thr=0.5):
    """Greedy matcher written as a double loop with explicit tie rules."""
    order = sorted(range(len(det_scores)),
                   key=lambda d: (-det_scores[d], *[float(v) for v in det_boxes[d]]))
    used = set()
    pairs = []
    for d in order:
        best, best_iou = None, -1.0
        for g in range(len(gt_boxes)):
            if g in used:
                continue
            v = iou_scalar(det_boxes[d], gt_boxes[g])
            if v > best_iou:
                best, best_iou = g, v
        if best is not None and best_iou >= thr:
            used.add(best)
            pairs.append((d, best))
    return pairs


def pyramid_scales(h, w, min_face, factor):
    scales = []
    s = 12.0 / min_face
    while min(h, w) * s >= 12:
        scales.append(s)
        s *= factor
    return scales


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
