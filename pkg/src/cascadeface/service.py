"""HTTP wrapper around the detector.

Run with ``cascadeface serve --model M`` or any ASGI server pointed at
:func:`create_app`.
"""
from __future__ import annotations

import base64
import binascii
import io
import time
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image, UnidentifiedImageError

from . import __version__
from .cascade import detect
from .model import CascadeModel, load_model
from .schema import DetectRequest, DetectResponse, Health, image_document


def decode_image_bytes(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image: {exc}") from exc


def create_app(model: Optional[CascadeModel] = None, model_path=None) -> FastAPI:
    if model is None and model_path is not None:
        model = load_model(model_path)
    app = FastAPI(title="cascadeface", version=__version__)
    app.state.model = model

    @app.get("/health", response_model=Health)
    def health() -> Health:
        m = app.state.model
        return Health(status="ok", model_loaded=m is not None,
                      nets=sorted(m.nets) if m else [], bridged=bool(m and m.bridged),
                      version=__version__)

    @app.post("/detect", response_model=DetectResponse)
    def run_detect(req: DetectRequest) -> DetectResponse:
        m = app.state.model
        if m is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        try:
            raw = base64.b64decode(req.image_b64, validate=True)
            image = decode_image_bytes(raw)
        except (binascii.Error, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        start = time.perf_counter()
        dets = detect(m, image, req.thresholds, min_face=req.min_face)
        doc = image_document(req.name, dets)
        return DetectResponse(seconds=time.perf_counter() - start, **doc)

    return app
