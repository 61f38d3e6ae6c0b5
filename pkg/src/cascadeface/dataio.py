"""Image decoding and annotated dataset directories.

A dataset directory holds ``annotations.jsonl`` (one record per image) and
the images it references::

    {"image": "images/00000.png", "faces": [{"box": [x, y, w, h],
      "landmarks": [[x, y], ...five points...]}]}

Landmark order: left eye, right eye, nose, left mouth corner, right mouth corner.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CascadeError
from .sampler import Face
from .synth import SyntheticScene

ANNOTATIONS = "annotations.jsonl"


class ImageDecodeError(CascadeError, ValueError):
    pass


def read_image(path) -> np.ndarray:
    """Decode a PNG or binary PPM into an ``(H, W, 3)`` uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path)


@dataclass
class Record:
    image: str
    faces: list

    def to_json(self) -> dict:
        return {"image": self.image, "faces": [f.to_record() for f in self.faces]}

    @classmethod
    def from_json(cls, d: dict) -> "Record":
        return cls(d["image"], [Face.from_record(f) for f in d.get("faces", [])])


def write_dataset(root, scenes: Sequence[SyntheticScene]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, scene in enumerate(scenes):
        rel = f"images/{i:05d}.png"
        write_image(root / rel, scene.image)
        lines.append(json.dumps(Record(rel, scene.faces).to_json(), sort_keys=True))
    (root / ANNOTATIONS).write_text("\n".join(lines) + ("\n" if lines else ""))
    return root


def read_records(root) -> list:
    root = Path(root)
    path = root / ANNOTATIONS
    if not path.exists():
        raise FileNotFoundError(f"no {ANNOTATIONS} in {root}")
    return [Record.from_json(json.loads(line)) for line in path.read_text().splitlines()
            if line.strip()]


def iter_scenes(root) -> Iterator[SyntheticScene]:
    root = Path(root)
    for i, rec in enumerate(read_records(root)):
        yield SyntheticScene(read_image(root / rec.image), rec.faces, i)


def load_scenes(root) -> list:
    return list(iter_scenes(root))
