"""Pydantic models for the detection JSON document and the HTTP service."""
from __future__ import annotations

from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .cascade import DEFAULT_THRESHOLDS

Point = Tuple[float, float]


class Detection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    box: Tuple[float, float, float, float]
    score: float = Field(ge=0.0, le=1.0)
    landmarks: Tuple[Point, Point, Point, Point, Point]

    @field_validator("box")
    @classmethod
    def _positive_size(cls, v):
        if v[2] < 0 or v[3] < 0:
            raise ValueError("box width and height must be non-negative")
        return v


class ImageDetections(BaseModel):
    """One JSON document per image."""

    model_config = ConfigDict(extra="forbid")

    image: str
    detections: List[Detection]


class DetectRequest(BaseModel):
    image_b64: str = Field(description="PNG or binary PPM bytes, base64 encoded")
    name: str = "image"
    thresholds: Tuple[float, float, float] = DEFAULT_THRESHOLDS
    min_face: float = Field(24.0, ge=12.0)

    @field_validator("thresholds")
    @classmethod
    def _unit_interval(cls, v):
        if not all(0.0 <= t <= 1.0 for t in v):
            raise ValueError("thresholds must lie in [0, 1]")
        return v


class DetectResponse(ImageDetections):
    model_config = ConfigDict(extra="forbid")

    seconds: float


class Health(BaseModel):
    status: str
    model_loaded: bool
    nets: List[str]
    bridged: bool = False
    version: Optional[str] = None


def image_document(name: str, detections) -> dict:
    """Build and validate the JSON document for ``detections``."""
    doc = {"image": name, "detections": [d.to_json() for d in detections]}
    return ImageDetections.model_validate(doc).model_dump(mode="json")
