"""Procedural face scenes with exact box and landmark ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import BoundingBox
from .sampler import Face

SKIN_TONES = np.array([
    (236, 188, 150), (224, 172, 105), (198, 134, 66), (141, 85, 36), (255, 219, 172),
    (241, 194, 125), (170, 110, 70),
], dtype=np.float64)


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) uint8
    faces: list = field(default_factory=list)
    seed: int = 0


def _background(rng, width, height):
    # coarse color grid, upsampled, plus pixel noise
    gh, gw = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    grid = rng.uniform(0, 255, size=(gh, gw, 3)).astype(np.uint8)
    img = Image.fromarray(grid, "RGB").resize((width, height), Image.BILINEAR)
    return img


def _draw_distractor(draw, rng, width, height):
    kind = int(rng.integers(4))
    s = rng.uniform(10, min(width, height) * 0.5)
    x, y = rng.uniform(-s / 2, width - s / 2), rng.uniform(-s / 2, height - s / 2)
    if kind == 3:
        # featureless skin-coloured blob: a hard negative
        color = tuple(int(c) for c in np.clip(SKIN_TONES[rng.integers(len(SKIN_TONES))]
                                              + rng.normal(0, 12, 3), 0, 255))
        draw.ellipse([x, y, x + s * rng.uniform(0.7, 0.95), y + s], fill=color)
        return
    color = tuple(int(c) for c in rng.integers(0, 256, 3))
    if kind == 0:
        draw.rectangle([x, y, x + s, y + s * rng.uniform(0.3, 1.5)], fill=color)
    elif kind == 1:
        draw.ellipse([x, y, x + s, y + s * rng.uniform(0.5, 1.5)], fill=color)
    else:
        draw.line([x, y, x + s * rng.uniform(-1, 1), y + s * rng.uniform(-1, 1)], fill=color,
                  width=int(rng.integers(1, 5)))


def _draw_face(draw, rng, x, y, fw, fh) -> np.ndarray:
    skin = np.clip(SKIN_TONES[rng.integers(len(SKIN_TONES))] + rng.normal(0, 10, 3), 0, 255)
    draw.ellipse([x, y, x + fw, y + fh], fill=tuple(int(c) for c in skin))
    cx, cy = x + fw / 2, y + fh / 2
    j = lambda scale: rng.uniform(-scale, scale)  # noqa: E731
    eye_dx = fw * (0.2 + j(0.03))
    eye_y = cy - fh * (0.12 + j(0.03))
    eye_r = max(1.0, fw * (0.07 + j(0.015)))
    dark = tuple(int(c) for c in rng.integers(0, 60, 3))
    le = (cx - eye_dx + fw * j(0.02), eye_y)
    re = (cx + eye_dx + fw * j(0.02), eye_y + fh * j(0.02))
    for ex, ey in (le, re):
        draw.ellipse([ex - eye_r, ey - eye_r, ex + eye_r, ey + eye_r], fill=dark)
    nose = (cx + fw * j(0.04), cy + fh * (0.06 + j(0.03)))
    nr = max(1.0, fw * 0.05)
    nose_color = tuple(int(c) for c in skin * 0.55)
    draw.ellipse([nose[0] - nr, nose[1] - nr, nose[0] + nr, nose[1] + nr], fill=nose_color)
    mouth_y = cy + fh * (0.26 + j(0.03))
    half = fw * (0.2 + j(0.04))
    lm = (cx - half, mouth_y + fh * j(0.02))
    rm = (cx + half, mouth_y + fh * j(0.02))
    lip = (int(rng.integers(120, 200)), int(rng.integers(0, 50)), int(rng.integers(20, 70)))
    draw.line([lm, rm], fill=lip, width=max(1, int(round(fh * 0.06))))
    return np.array([le, re, nose, lm, rm], dtype=np.float64)


def render_scene(seed: int, width: int = 160, height: int = 120,
                 faces_per_image: Sequence[int] = (0, 3), face_size=(24, 64),
                 distractors=(0, 4), max_retries: int = 50) -> SyntheticScene:
    """Render one scene; faces never overlap each other and lie inside the image."""
    if min(width, height) < 48:
        raise ValueError("synthetic images must be at least 48x48")
    rng = np.random.default_rng(seed)
    img = _background(rng, width, height)
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(distractors[0], distractors[1] + 1))):
        _draw_distractor(draw, rng, width, height)
    n_faces = int(rng.integers(faces_per_image[0], faces_per_image[1] + 1))
    lo, hi = face_size
    hi = min(hi, min(width, height) - 2)
    faces = []
    for _ in range(n_faces):
        for _ in range(max_retries):
            fh = rng.uniform(lo, hi)
            fw = fh * rng.uniform(0.75, 0.9)
            x, y = rng.uniform(0, width - fw), rng.uniform(0, height - fh)
            box = BoundingBox(float(x), float(y), float(fw), float(fh))
            margin = 4
            if all(box.x2 + margin < f.box.x or f.box.x2 + margin < box.x
                   or box.y2 + margin < f.box.y or f.box.y2 + margin < box.y for f in faces):
                break
        else:
            continue
        landmarks = _draw_face(draw, rng, x, y, fw, fh)
        faces.append(Face(box, landmarks))
    arr = np.asarray(img, dtype=np.float64)
    arr += rng.normal(0, 6, arr.shape)
    return SyntheticScene(np.clip(np.rint(arr), 0, 255).astype(np.uint8), faces, seed)


def synth_generate(count: int, width: int = 160, height: int = 120,
                   faces_per_image: Sequence[int] = (0, 3), seed: int = 0, **kwargs) -> list:
    """``count`` scenes; scene ``i`` is rendered from seed ``seed * 1_000_003 + i``."""
    return [render_scene(seed * 1_000_003 + i, width, height, faces_per_image, **kwargs)
            for i in range(count)]
