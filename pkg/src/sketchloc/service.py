"""HTTP localization service: POST /localize plus health, gallery and
category metadata endpoints. The model is loaded once and never mutated."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .archive import read_scene_archive
from .checkpoint import load_checkpoint, restore
from .inference import (LocalizeError, attention_payload, decode_image_b64,
                        encode_image_b64, localize, wire_sketches_to_strokes)
from .model import ModelConfig, SketchLocalizer


class SketchPayload(BaseModel):
    category: str | None = None
    drawing: list[list[list[int]]]


class LocalizeRequest(BaseModel):
    image_b64: str | None = None
    scene_id: str | None = None
    sketches: list[SketchPayload]
    fusion: str = "feature"
    max_detections: int = Field(default=100, ge=1)


def error_payload(code: str, message: str, field_name: str | None = None) -> dict:
    err = {"code": code, "message": message}
    if field_name:
        err["field"] = field_name
    return {"error": err}


def load_model(ckpt_path, config: ModelConfig | None = None) -> tuple[SketchLocalizer, dict]:
    """Build the model that matches the checkpoint's attention flag and
    restore its parameters."""
    ckpt = load_checkpoint(ckpt_path)
    config = config or ModelConfig()
    if not ckpt.meta.get("with_attention", True):
        from dataclasses import replace
        config = replace(config, with_attention=False)
    model = SketchLocalizer(config, seed=0)
    restore(model, ckpt, strict=True)
    model.eval()
    return model, ckpt.meta


def create_app(model: SketchLocalizer, meta: dict | None = None,
               gallery_dir=None) -> FastAPI:
    app = FastAPI(title="sketchloc", docs_url=None, redoc_url=None)
    meta = meta or {}
    started = time.monotonic()
    gallery = {}
    if gallery_dir is not None and Path(gallery_dir).exists():
        gallery = {rec.scene_id: rec.scene for rec in read_scene_archive(gallery_dir)}

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        field = ".".join(str(p) for p in first.get("loc", []) if p != "body")
        return JSONResponse(status_code=400, content=error_payload(
            "invalid_request", first.get("msg", "invalid request"), field or None))

    @app.exception_handler(LocalizeError)
    async def localize_error_handler(request: Request, exc: LocalizeError):
        return JSONResponse(status_code=400, content=error_payload(
            "invalid_request", str(exc), exc.field_name))

    @app.get("/health")
    def health():
        return {"model_digest": model.config.digest(),
                "uptime_s": time.monotonic() - started,
                "with_attention": model.with_attention}

    @app.get("/categories")
    def categories():
        return {"categories": meta.get("categories", []),
                "sketch_size": model.config.sketch_size,
                "image_size": model.config.image_size}

    @app.get("/gallery")
    def gallery_listing():
        scenes = []
        for sid in sorted(gallery):
            scene = gallery[sid]
            thumb = scene.image[::4, ::4]
            scenes.append({"id": sid, "width": scene.image.shape[1],
                           "height": scene.image.shape[0],
                           "thumbnail_b64": encode_image_b64(thumb)})
        return {"scenes": scenes}

    @app.get("/gallery/{scene_id}")
    def gallery_image(scene_id: str):
        if scene_id not in gallery:
            return JSONResponse(status_code=404, content=error_payload(
                "not_found", f"unknown scene id {scene_id!r}", "scene_id"))
        return {"id": scene_id, "image_b64": encode_image_b64(gallery[scene_id].image)}

    @app.post("/localize")
    def localize_endpoint(req: LocalizeRequest):
        if not req.sketches:
            return JSONResponse(status_code=400, content=error_payload(
                "invalid_request", "at least one sketch is required", "sketches"))
        if req.scene_id is not None:
            if req.scene_id not in gallery:
                return JSONResponse(status_code=404, content=error_payload(
                    "not_found", f"unknown scene id {req.scene_id!r}", "scene_id"))
            image = gallery[req.scene_id].image
        elif req.image_b64 is not None:
            image = decode_image_b64(req.image_b64)
        else:
            return JSONResponse(status_code=400, content=error_payload(
                "invalid_request", "provide image_b64 or scene_id", "image_b64"))
        sketches = wire_sketches_to_strokes([s.model_dump() for s in req.sketches])
        try:
            result = localize(model, image, sketches, fusion=req.fusion,
                              max_detections=req.max_detections)
        except ValueError as exc:
            return JSONResponse(status_code=400, content=error_payload(
                "invalid_request", str(exc), getattr(exc, "field_name", None)))
        return {
            "detections": result.detections,
            "attention_map": attention_payload(result.attention),
            "model_digest": result.model_digest,
            "timing_ms": result.timing_ms,
            "image_size": list(result.image_size),
        }

    return app


def serve(ckpt_path, host: str = "127.0.0.1", port: int = 8008, gallery_dir=None):
    """Blocking entry point used by the CLI."""
    import uvicorn

    model, meta = load_model(ckpt_path)
    app = create_app(model, meta, gallery_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
