"""Hard example proposals: IoU labeling, window sampling, OHEM selection, fill."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, SamplingError
from .geometry import (
    BoundingBox, crop_boxes, iou, overlap_matrix, regression_target,
)
from .losses import TaskLabels

log = logging.getLogger(__name__)

NEG_IOU = 0.3
POS_IOU = 0.7
# left eye, right eye, nose, left mouth corner, right mouth corner
FLIP_ORDER = (1, 0, 2, 4, 3)


class Label(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    PART = 2
    LANDMARK = 3


@dataclass(frozen=True)
class Face:
    """One annotated face: box plus optional (5, 2) landmark pixels."""

    box: BoundingBox
    landmarks: Optional[np.ndarray] = None

    def __eq__(self, other):
        if not isinstance(other, Face):
            return NotImplemented
        if self.box != other.box:
            return False
        if self.landmarks is None or other.landmarks is None:
            return self.landmarks is None and other.landmarks is None
        return bool(np.array_equal(self.landmarks, other.landmarks))

    def to_record(self) -> dict:
        rec = {"box": [self.box.x, self.box.y, self.box.w, self.box.h]}
        if self.landmarks is not None:
            rec["landmarks"] = np.asarray(self.landmarks, dtype=float).reshape(5, 2).tolist()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Face":
        lm = rec.get("landmarks")
        return cls(BoundingBox(*map(float, rec["box"])),
                   None if lm is None else np.asarray(lm, dtype=np.float64).reshape(5, 2))


@dataclass(eq=False)
class Proposal:
    box: BoundingBox
    label: Label
    matched: Optional[BoundingBox] = None
    landmarks: Optional[np.ndarray] = None  # 10 values normalized to the window
    patch: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = field(default=None, repr=False)
    flipped: bool = False

    @property
    def reg_target(self) -> Optional[np.ndarray]:
        if self.matched is None:
            return None
        return regression_target(self.box, self.matched)


def label_proposal(p: BoundingBox, ground_truths: Sequence[BoundingBox]):
    """Classify a window by its best IoU against the ground truths."""
    if not ground_truths:
        return Label.NEGATIVE, None
    overlaps = [iou(p, g) for g in ground_truths]
    best = int(np.argmax(overlaps))
    return label_from_iou(overlaps[best]), ground_truths[best]


def label_from_iou(value: float) -> Label:
    if value < NEG_IOU:
        return Label.NEGATIVE
    if value > POS_IOU:
        return Label.POSITIVE
    return Label.PART


def _normalize_landmarks(landmarks, box: BoundingBox) -> np.ndarray:
    lm = np.asarray(landmarks, dtype=np.float64).reshape(5, 2)
    out = np.empty((5, 2))
    out[:, 0] = (lm[:, 0] - box.x) / box.w
    out[:, 1] = (lm[:, 1] - box.y) / box.h
    return out.reshape(10)


def flip_landmarks(normalized) -> np.ndarray:
    """Mirror window-normalized landmarks: x -> 1 - x, swap left/right points."""
    lm = np.asarray(normalized, dtype=np.float64).reshape(5, 2)[list(FLIP_ORDER)].copy()
    lm[:, 0] = 1.0 - lm[:, 0]
    return lm.reshape(10)


def _mirror_box(b: BoundingBox, axis_x: float) -> BoundingBox:
    return BoundingBox(2 * axis_x - b.x2, b.y, b.w, b.h)


def generate_proposals(image: np.ndarray, faces: Sequence[Face], counts, rng, size: int = 12,
                       stats: Optional[dict] = None, max_tries: int = 40) -> list:
    """Random square windows labeled by IoU, plus ground-truth landmark crops.

    ``counts`` maps :class:`Label` (or its int value) to the maximum number of
    proposals of that class, or is a 4-tuple (neg, pos, part, landmark).
    """
    rng = np.random.default_rng(rng)
    if not isinstance(counts, dict):
        counts = dict(zip(Label, counts))
    want = {Label(k): int(v) for k, v in counts.items()}
    h, w = image.shape[:2]
    stats = stats if stats is not None else {}
    if min(h, w) < 12:
        stats["skipped"] = stats.get("skipped", 0) + 1
        log.warning("image %dx%d smaller than the minimum window", w, h)
        return []
    gts = [f.box for f in faces]
    gt_arr = np.array([g.as_array() for g in gts]) if gts else np.zeros((0, 4))
    buckets = {label: [] for label in Label}

    def take(box_arr, label, matched):
        if len(buckets[label]) < want.get(label, 0):
            buckets[label].append((box_arr, label, matched))

    # windows scattered over the whole image; mostly negatives
    need = want.get(Label.NEGATIVE, 0)
    tries = 0
    while len(buckets[Label.NEGATIVE]) < need and tries < max_tries * max(need, 1):
        tries += 1
        side = rng.uniform(12, max(12.0, min(h, w) * 0.6))
        box = np.array([rng.uniform(0, w - side), rng.uniform(0, h - side), side, side])
        if len(gts):
            ov = overlap_matrix(box[None], gt_arr)[0]
            best = int(ov.argmax())
            label = label_from_iou(ov[best])
            take(box, label, gts[best] if label != Label.NEGATIVE else None)
        else:
            take(box, Label.NEGATIVE, None)

    # windows jittered around faces; positives, part faces, near-miss negatives
    need = want.get(Label.POSITIVE, 0) + want.get(Label.PART, 0)
    tries = 0
    while gts and tries < max_tries * max(need, 1) and (
            len(buckets[Label.POSITIVE]) < want.get(Label.POSITIVE, 0)
            or len(buckets[Label.PART]) < want.get(Label.PART, 0)):
        tries += 1
        g = gts[int(rng.integers(len(gts)))]
        base = max(g.w, g.h)
        side = base * rng.uniform(0.8, 1.25)
        if side < 12:
            continue
        cx, cy = g.center
        cx += rng.uniform(-0.25, 0.25) * base
        cy += rng.uniform(-0.25, 0.25) * base
        box = np.array([cx - side / 2, cy - side / 2, side, side])
        if box[0] < 0 or box[1] < 0 or box[0] + side > w or box[1] + side > h:
            continue
        ov = overlap_matrix(box[None], gt_arr)[0]
        best = int(ov.argmax())
        label = label_from_iou(ov[best])
        take(box, label, gts[best] if label != Label.NEGATIVE else None)

    # ground-truth crops with landmark labels
    landmark_faces = [f for f in faces if f.landmarks is not None]
    need = want.get(Label.LANDMARK, 0)
    tries = 0
    while landmark_faces and len(buckets[Label.LANDMARK]) < need and tries < max_tries * need:
        tries += 1
        f = landmark_faces[int(rng.integers(len(landmark_faces)))]
        base = max(f.box.w, f.box.h)
        side = base * rng.uniform(0.95, 1.05)
        cx, cy = f.box.center
        cx += rng.uniform(-0.05, 0.05) * base
        cy += rng.uniform(-0.05, 0.05) * base
        box = np.array([cx - side / 2, cy - side / 2, side, side])
        lm = _normalize_landmarks(f.landmarks, BoundingBox.from_array(box))
        if np.all((lm >= 0) & (lm <= 1)):
            buckets[Label.LANDMARK].append((box, Label.LANDMARK, f.box, lm))

    items = [it for label in Label for it in buckets[label]]
    if not items:
        return []
    patches, _ = crop_boxes(image, np.array([it[0] for it in items]), size)
    out = []
    for it, patch in zip(items, patches):
        lm = it[3] if len(it) > 3 else None
        out.append(Proposal(BoundingBox.from_array(it[0]), it[1], it[2], lm, patch, image))
    return out


def ohem_select(per_sample_losses, keep_fraction: float) -> np.ndarray:
    """Mask of the ``ceil(keep_fraction * n)`` largest losses; ties favour lower indices."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if not (0.0 < keep_fraction <= 1.0):
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n = losses.size
    if n == 0:
        raise ContractError("ohem_select needs at least one loss")
    k = keep_count(n, keep_fraction)
    order = np.argsort(-losses, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def keep_count(n: int, keep_fraction: float) -> int:
    # round first so 0.7 * 10 counts as 7, not 7.000000000000001
    return min(n, max(1, math.ceil(round(keep_fraction * n, 9))))


def _transform(p: Proposal, rng, size: int) -> Optional[Proposal]:
    flip = bool(rng.random() < 0.5)
    scale = rng.uniform(0.95, 1.05)
    tx, ty = rng.uniform(-0.05, 0.05, size=2)
    b = p.box
    new_box = BoundingBox(b.x + tx * b.w, b.y + ty * b.h, b.w * scale, b.h * scale)
    if p.image is not None:
        patches, valid = crop_boxes(p.image, new_box.as_array()[None], size)
    else:
        # no source image: resample the existing patch in its own frame
        frame = np.array([tx * size, ty * size, scale * size, scale * size])
        patches, valid = crop_boxes(p.patch.transpose(1, 2, 0), frame[None], size, normalized=True)
    if not valid[0]:
        return None
    patch = patches[0]

    matched = p.matched
    landmarks = p.landmarks
    if matched is not None:
        label = label_from_iou(iou(new_box, matched)) if p.label != Label.LANDMARK else p.label
        if label != p.label:
            return None
    elif p.label == Label.NEGATIVE:
        label = p.label
    else:
        return None
    if landmarks is not None:
        # old-window normalized -> pixels -> new-window normalized
        lm = np.asarray(landmarks).reshape(5, 2)
        pix = np.stack([b.x + lm[:, 0] * b.w, b.y + lm[:, 1] * b.h], axis=1)
        landmarks = _normalize_landmarks(pix, new_box)
        if not np.all((landmarks >= 0) & (landmarks <= 1)):
            return None
    if flip:
        patch = patch[:, :, ::-1].copy()
        axis = new_box.x + new_box.w / 2.0
        if matched is not None:
            matched = _mirror_box(matched, axis)
        if landmarks is not None:
            landmarks = flip_landmarks(landmarks)
    return replace(p, box=new_box, label=label, matched=matched, landmarks=landmarks,
                   patch=patch, flipped=p.flipped ^ flip)


def augment_fill(hard: Sequence[Proposal], target: int, rng, max_tries: int = 20) -> list:
    """Pad ``hard`` to ``target`` items with randomly transformed copies.

    Transforms are a horizontal flip, up to 5% translation and up to 5%
    scale change. A transform that changes the proposal's label is redrawn.
    """
    hard = list(hard)
    if len(hard) >= target:
        return hard[:target]
    if not hard:
        raise SamplingError("cannot fill a batch from an empty hard-example list")
    rng = np.random.default_rng(rng)
    out = list(hard)
    while len(out) < target:
        src = hard[int(rng.integers(len(hard)))]
        size = src.patch.shape[-1]
        new = None
        for _ in range(max_tries):
            new = _transform(src, rng, size)
            if new is not None:
                break
        if new is None:
            new = replace(src, patch=src.patch.copy())
        out.append(new)
    return out


@dataclass
class SampleSet:
    """Array form of labeled patches, ready for training."""

    patches: np.ndarray  # (N, 3, S, S) float32
    kind: np.ndarray  # (N,) Label values
    cls: np.ndarray  # (N,) -1 absent
    reg: np.ndarray  # (N, 4) NaN absent
    pts: np.ndarray  # (N, 10) NaN absent

    def __len__(self):
        return len(self.kind)

    @property
    def size(self) -> int:
        return self.patches.shape[-1]

    @classmethod
    def empty(cls, size: int) -> "SampleSet":
        return cls(np.zeros((0, 3, size, size), np.float32), np.zeros(0, np.int8),
                   np.zeros(0, np.int64), np.zeros((0, 4)), np.zeros((0, 10)))

    @classmethod
    def from_proposals(cls, proposals: Sequence[Proposal], size: Optional[int] = None):
        if not proposals:
            return cls.empty(size or 12)
        n = len(proposals)
        kind = np.array([p.label for p in proposals], dtype=np.int8)
        cls_star = np.full(n, -1, dtype=np.int64)
        cls_star[kind == Label.NEGATIVE] = 0
        cls_star[kind == Label.POSITIVE] = 1
        reg = np.full((n, 4), np.nan)
        pts = np.full((n, 10), np.nan)
        for i, p in enumerate(proposals):
            if p.label in (Label.POSITIVE, Label.PART):
                reg[i] = p.reg_target
            elif p.label == Label.LANDMARK:
                pts[i] = p.landmarks
        patches = np.stack([p.patch for p in proposals]).astype(np.float32)
        return cls(patches, kind, cls_star, reg, pts)

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.patches[index], self.kind[index], self.cls[index],
                         self.reg[index], self.pts[index])

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(*(np.concatenate([a, b]) for a, b in zip(
            (self.patches, self.kind, self.cls, self.reg, self.pts),
            (other.patches, other.kind, other.cls, other.reg, other.pts))))

    def counts(self) -> dict:
        return {label.name.lower(): int(np.sum(self.kind == label)) for label in Label}

    def labels(self, tasks: Optional[Sequence[str]] = None) -> TaskLabels:
        """Task labels with a mask enabling ``tasks`` where the label exists.

        With ``tasks=None`` every available label is enabled.
        """
        tasks = tasks or ("cls", "reg", "pts")
        present = np.stack([
            self.cls >= 0,
            np.all(np.isfinite(self.reg), axis=1),
            np.all(np.isfinite(self.pts), axis=1),
        ], axis=1)
        want = np.array([t in tasks for t in ("cls", "reg", "pts")])
        return TaskLabels(self.cls, self.reg, self.pts, present & want)
