"""Detection and landmark metrics over annotated scenes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cascade import DEFAULT_THRESHOLDS, DetectionResult, detect
from .geometry import overlap_matrix

MATCH_IOU = 0.5


def score_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending score; ties broken by box coordinates so input order never matters."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    # lexsort uses the last key as primary
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold: float = MATCH_IOU) -> list:
    """Greedy matching: each detection, best score first, takes the unmatched
    ground truth it overlaps most (IoU >= threshold). Returns ``(det, gt)`` pairs."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if not len(det_boxes) or not len(gt_boxes):
        return []
    ov = overlap_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    pairs = []
    for d in score_order(det_boxes, det_scores):
        cand = np.where(taken, -1.0, ov[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            taken[g] = True
            pairs.append((int(d), g))
    return pairs


def landmark_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean point distance over the inter-ocular distance of ``truth`` (5, 2)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(5, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(5, 2)
    iod = float(np.linalg.norm(truth[0] - truth[1]))
    if iod <= 0:
        return float("nan")
    return float(np.mean(np.linalg.norm(pred - truth, axis=1)) / iod)


@dataclass
class ImageEval:
    scores: np.ndarray  # per detection
    matched: np.ndarray  # per detection, bool
    n_gt: int
    landmark_errors: list = field(default_factory=list)


@dataclass
class EvalReport:
    images: list

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_gt(self) -> int:
        return sum(i.n_gt for i in self.images)

    @property
    def n_det(self) -> int:
        return sum(len(i.scores) for i in self.images)

    @property
    def true_positives(self) -> int:
        return int(sum(i.matched.sum() for i in self.images))

    @property
    def false_positives(self) -> int:
        return self.n_det - self.true_positives

    @property
    def recall(self) -> float:
        return self.true_positives / self.n_gt if self.n_gt else float("nan")

    @property
    def precision(self) -> float:
        return self.true_positives / self.n_det if self.n_det else float("nan")

    @property
    def f1(self) -> float:
        tp = self.true_positives
        denom = self.n_gt + self.n_det
        return 2.0 * tp / denom if denom else float("nan")

    @property
    def landmark_error(self) -> float:
        errs = [e for i in self.images for e in i.landmark_errors if math.isfinite(e)]
        return float(np.mean(errs)) if errs else float("nan")

    def roc(self) -> list:
        """Rows ``(score_threshold, false_positives, true_positive_rate)``, one per
        distinct detection score, thresholds descending."""
        if not self.n_det:
            return []
        scores = np.concatenate([i.scores for i in self.images])
        hits = np.concatenate([i.matched for i in self.images])
        order = np.argsort(-scores, kind="stable")
        scores, hits = scores[order], hits[order]
        tp = np.cumsum(hits)
        fp = np.cumsum(~hits)
        last = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
        n_gt = max(self.n_gt, 1)
        return [(float(scores[k]), int(fp[k]), float(tp[k]) / n_gt) for k in last]

    def recall_at_fp(self, fp_per_image: float = 1.0) -> float:
        """Best true-positive rate whose false positive count is <= the budget."""
        budget = fp_per_image * self.n_images
        best = 0.0
        for _, fp, tpr in self.roc():
            if fp <= budget:
                best = max(best, tpr)
        return best

    def summary(self) -> dict:
        return {
            "images": self.n_images,
            "faces": self.n_gt,
            "detections": self.n_det,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
            "recall_at_1fp_per_image": self.recall_at_fp(1.0),
            "landmark_mean_error": self.landmark_error,
        }


def evaluate_image(detections: Sequence[DetectionResult], faces,
                   iou_threshold: float = MATCH_IOU) -> ImageEval:
    boxes = np.array([d.box.as_array() for d in detections]).reshape(-1, 4)
    scores = np.array([d.score for d in detections], dtype=np.float64)
    gts = np.array([f.box.as_array() for f in faces]).reshape(-1, 4)
    pairs = match_detections(boxes, scores, gts, iou_threshold)
    matched = np.zeros(len(detections), dtype=bool)
    errors = []
    for d, g in pairs:
        matched[d] = True
        lm = detections[d].landmarks
        if faces[g].landmarks is not None and lm is not None:
            errors.append(landmark_error(np.asarray(lm).reshape(5, 2), faces[g].landmarks))
    return ImageEval(scores, matched, len(faces), errors)


def evaluate_detections(per_image: Sequence[Sequence[DetectionResult]], scenes,
                        iou_threshold: float = MATCH_IOU) -> EvalReport:
    if len(per_image) != len(scenes):
        raise ValueError("need one detection list per scene")
    return EvalReport([evaluate_image(d, s.faces, iou_threshold)
                       for d, s in zip(per_image, scenes)])


def evaluate_model(model, scenes, thresholds=DEFAULT_THRESHOLDS, **detect_kw):
    """Run the detector over ``scenes``; returns ``(report, detections)``."""
    dets = [detect(model, s.image, thresholds, **detect_kw) for s in scenes]
    return evaluate_detections(dets, scenes), dets


def write_report(report: EvalReport, out_dir, name: str = "metrics") -> tuple:
    """Write ``<name>.csv`` (ROC table) and ``<name>.txt`` (summary)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / f"{name}.csv", out / f"{name}.txt"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["score_threshold", "false_positives", "true_positive_rate"])
        for row in report.roc():
            w.writerow([f"{row[0]:.6f}", row[1], f"{row[2]:.6f}"])
    txt_path.write_text(format_summary(report.summary()))
    return csv_path, txt_path


def format_summary(summary: dict) -> str:
    lines = []
    for key, value in summary.items():
        lines.append(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return "\n".join(lines) + "\n"


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; entry ``k`` averages ``values[k-window+1 : k+1]``."""
    x = np.asarray(values, dtype=np.float64)
    if window <= 1 or len(x) < window:
        return x.copy()
    c = np.cumsum(np.r_[0.0, x])
    return (c[window:] - c[:-window]) / window


def iterations_to_reach(curve: Sequence[float], target: float, offset: int = 0) -> Optional[int]:
    """First 1-based iteration where ``curve`` drops to ``target`` or below."""
    hit = np.flatnonzero(np.asarray(curve) <= target)
    return int(hit[0]) + 1 + offset if len(hit) else None
