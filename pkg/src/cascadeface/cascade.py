"""Three-stage detection: pyramid scan, two refinement nets, NMS, landmarks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import StateError
from .geometry import (
    BoundingBox, apply_regression, apply_regression_array, clip_boxes, crop_boxes,
    crop_resize, overlap_matrix, resize_image, square,
)
from .nn import Network, avgpool2

DEFAULT_THRESHOLDS = (0.6, 0.6, 0.7)
LOCAL_NMS = 0.5
GLOBAL_NMS = 0.7
NET12_STRIDE = 2
NET12_WINDOW = 12

__all__ = [
    "BoundingBox", "DetectionResult", "PyramidLevel", "StageOutput", "apply_regression",
    "build_pyramid", "crop_resize", "detect", "nms", "nms_indices", "run_cascade", "scan_12net",
]


@dataclass
class PyramidLevel:
    scale: float
    image: np.ndarray  # (3, h, w), normalized


@dataclass
class DetectionResult:
    box: BoundingBox
    score: float
    landmarks: np.ndarray  # (10,) x1, y1, ..., x5, y5 in image pixels

    def to_json(self) -> dict:
        return {
            "box": [round(float(v), 2) for v in (self.box.x, self.box.y, self.box.w, self.box.h)],
            "score": round(float(self.score), 4),
            "landmarks": [[round(float(self.landmarks[2 * i]), 2),
                           round(float(self.landmarks[2 * i + 1]), 2)] for i in range(5)],
        }


@dataclass
class StageOutput:
    boxes: np.ndarray  # (N, 4)
    scores: np.ndarray  # (N,)
    landmarks: Optional[np.ndarray] = None  # (N, 10)

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls) -> "StageOutput":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, 10)))

    def take(self, index) -> "StageOutput":
        lm = None if self.landmarks is None else self.landmarks[index]
        return StageOutput(self.boxes[index], self.scores[index], lm)


def build_pyramid(image: np.ndarray, min_face: float = 24, scale_factor: float = 0.709):
    """Levels at scale (12 / min_face) * scale_factor**k while min side stays >= 12."""
    if min_face < NET12_WINDOW:
        raise ValueError("min_face must be >= 12")
    if not 0 < scale_factor < 1:
        raise ValueError("scale_factor must be in (0, 1)")
    h, w = image.shape[:2]
    levels = []
    scale = NET12_WINDOW / min_face
    while min(h, w) * scale >= NET12_WINDOW:
        rows, cols = int(math.ceil(h * scale)), int(math.ceil(w * scale))
        levels.append(PyramidLevel(scale, resize_image(image, rows, cols)))
        scale *= scale_factor
    return levels


def scan_12net(net: Network, level: PyramidLevel, threshold: float):
    """Dense 12net pass over one level.

    Returns ``(windows, scores, offsets)`` for cells with face probability
    >= ``threshold``; windows are in original-image pixels.
    """
    _, h, w = level.image.shape
    if h < NET12_WINDOW or w < NET12_WINDOW:
        return np.zeros((0, 4)), np.zeros(0), np.zeros((0, 4))
    heads = net.predict(level.image[None], keep_maps=True)
    prob = heads["cls"][0, 1]
    rows, cols = np.nonzero(prob >= threshold)
    side = NET12_WINDOW / level.scale
    windows = np.stack([
        cols * NET12_STRIDE / level.scale,
        rows * NET12_STRIDE / level.scale,
        np.full(len(rows), side),
        np.full(len(rows), side),
    ], axis=1).astype(np.float64)
    offsets = heads["reg"][0][:, rows, cols].T.astype(np.float64)
    return windows, prob[rows, cols].astype(np.float64), offsets


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float,
                mode: str = "union") -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order.

    A box is dropped when its overlap with an already kept box exceeds
    ``threshold``. Equal scores are ordered by lower index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        if not rest.size:
            break
        ov = overlap_matrix(boxes[i:i + 1], boxes[rest], mode)[0]
        order = rest[ov <= threshold]
    return np.array(keep, dtype=np.int64)


def nms(candidates: Sequence, threshold: float, mode: str = "union") -> list:
    """List form: ``candidates`` are ``(BoundingBox, score)`` pairs."""
    if not candidates:
        return []
    boxes = np.array([b.as_array() for b, _ in candidates])
    scores = np.array([s for _, s in candidates], dtype=np.float64)
    return [candidates[i] for i in nms_indices(boxes, scores, threshold, mode)]


def _bridge_features(model_nets: dict, crops: np.ndarray, upto: str, use_bridges: bool):
    """Trunk features of the lower nets for a batch of crops (bridge inputs)."""
    if upto == "net24":
        net24 = model_nets["net24"]
        if not (use_bridges and net24.spec.bridge_width):
            return None
        return model_nets["net12"].predict(avgpool2(crops))["features"]
    net48 = model_nets["net48"]
    if not (use_bridges and net48.spec.bridge_width):
        return None
    x24 = avgpool2(crops)
    f12 = _bridge_features(model_nets, x24, "net24", use_bridges)
    return model_nets["net24"].predict(x24, bridge=f12)["features"]


def _refine(nets: dict, name: str, image, cand: StageOutput, threshold: float, use_bridges,
            batch: int = 256):
    size = nets[name].spec.input_size
    windows = square(cand.boxes)
    crops, valid = crop_boxes(image, windows, size)
    windows, crops = windows[valid], crops[valid]
    probs, regs, pts = [], [], []
    for s in range(0, len(crops), batch):
        x = crops[s:s + batch]
        bridge = _bridge_features(nets, x, name, use_bridges)
        heads = nets[name].predict(x, bridge=bridge)
        probs.append(heads["cls"][:, 1])
        regs.append(heads["reg"])
        pts.append(heads["pts"])
    if not probs:
        return StageOutput.empty()
    prob = np.concatenate(probs).astype(np.float64)
    reg = np.concatenate(regs).astype(np.float64)
    lm = np.concatenate(pts).astype(np.float64)
    keep = prob >= threshold
    windows, prob, reg, lm = windows[keep], prob[keep], reg[keep], lm[keep]
    boxes = apply_regression_array(windows, reg)
    # landmarks are normalized to the cropped window
    lm_pix = np.empty_like(lm)
    lm_pix[:, 0::2] = windows[:, 0:1] + lm[:, 0::2] * windows[:, 2:3]
    lm_pix[:, 1::2] = windows[:, 1:2] + lm[:, 1::2] * windows[:, 3:4]
    return StageOutput(boxes, prob, lm_pix)


@dataclass
class CascadeRun:
    stages: list = field(default_factory=list)  # StageOutput per executed stage

    @property
    def counts(self) -> list:
        return [len(s) for s in self.stages]


def run_cascade(nets: dict, image: np.ndarray, thresholds=DEFAULT_THRESHOLDS,
                min_face: float = 24, scale_factor: float = 0.709, local_nms: float = LOCAL_NMS,
                global_nms: float = GLOBAL_NMS, per_level_nms: bool = True,
                cross_level_nms: bool = True, use_bridges: bool = True,
                upto: str = "net48") -> CascadeRun:
    """Run stages up to ``upto`` and keep every stage's surviving candidates."""
    if "net12" not in nets:
        raise StateError("model has no net12")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    run = CascadeRun()

    boxes, scores = [], []
    for level in build_pyramid(image, min_face, scale_factor):
        win, sc, off = scan_12net(nets["net12"], level, thresholds[0])
        if not len(sc):
            continue
        cal = apply_regression_array(win, off)
        if per_level_nms:
            keep = nms_indices(cal, sc, local_nms, "union")
            cal, sc = cal[keep], sc[keep]
        boxes.append(cal)
        scores.append(sc)
    if boxes:
        stage = StageOutput(np.concatenate(boxes), np.concatenate(scores))
        if cross_level_nms:
            stage = stage.take(nms_indices(stage.boxes, stage.scores, local_nms, "union"))
    else:
        stage = StageOutput.empty()
    run.stages.append(stage)
    if upto == "net12":
        return run

    if "net24" not in nets:
        raise StateError("model has no net24")
    stage = _refine(nets, "net24", image, stage, thresholds[1], use_bridges)
    stage = stage.take(nms_indices(stage.boxes, stage.scores, local_nms, "union"))
    run.stages.append(stage)
    if upto == "net24":
        return run

    if "net48" not in nets:
        raise StateError("model has no net48")
    stage = _refine(nets, "net48", image, stage, thresholds[2], use_bridges)
    stage = stage.take(nms_indices(stage.boxes, stage.scores, global_nms, "min"))
    clipped = clip_boxes(stage.boxes, w, h)
    ok = (clipped[:, 2] > 0) & (clipped[:, 3] > 0)
    stage = StageOutput(clipped[ok], stage.scores[ok], stage.landmarks[ok])
    run.stages.append(stage)
    return run


def detect(model, image: np.ndarray, thresholds=DEFAULT_THRESHOLDS, nms_thresholds=None,
           min_face: float = 24, scale_factor: float = 0.709, use_bridges: bool = True,
           **kwargs) -> list:
    """Full cascade. ``model`` is a CascadeModel or a dict of nets.

    ``nms_thresholds`` is ``(local, global)``.
    """
    nets = getattr(model, "nets", model)
    if not nets:
        raise StateError("no model loaded")
    local, global_ = nms_thresholds or (LOCAL_NMS, GLOBAL_NMS)
    run = run_cascade(nets, image, thresholds, min_face, scale_factor, local, global_,
                      use_bridges=use_bridges, **kwargs)
    final = run.stages[-1]
    return [DetectionResult(BoundingBox.from_array(b, float(s)), float(s), lm)
            for b, s, lm in zip(final.boxes, final.scores, final.landmarks)]
