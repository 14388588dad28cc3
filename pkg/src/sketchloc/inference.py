"""Single-shot localization: the shared core behind the HTTP service and the
offline CLI."""

from __future__ import annotations

import base64
import io
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .attention import upsample_attention
from .model import FUSION_MODES, SketchLocalizer
from .pipeline import detect
from .sketches import QUANT_LEVELS, StrokeSketch, rasterize_sketch


class LocalizeError(ValueError):
    """Validation failure on a localization request."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


@dataclass
class LocalizeResult:
    detections: list[dict]        # [{"box": [x1,y1,x2,y2], "score": s}, ...]
    attention: np.ndarray         # (H, W) float32, image resolution
    model_digest: str
    timing_ms: float
    image_size: tuple[int, int] = field(default=(0, 0))  # (W, H)


def localize(model: SketchLocalizer, image: np.ndarray,
             sketches: list[StrokeSketch], fusion: str = "feature",
             max_detections: int = 100) -> LocalizeResult:
    """Rasterize the queries, run the pipeline, return scored detections and
    the attention heatmap upsampled to image resolution."""
    if not sketches:
        raise LocalizeError("at least one sketch is required", field_name="sketches")
    if fusion not in FUSION_MODES:
        raise LocalizeError(f"fusion must be one of {FUSION_MODES}", field_name="fusion")
    if max_detections < 1:
        raise LocalizeError("max_detections must be >= 1", field_name="max_detections")
    labels = {s.category for s in sketches if s.category}
    if len(labels) > 1:
        raise LocalizeError(
            f"sketches carry conflicting category labels {sorted(labels)}",
            field_name="sketches")
    t0 = time.perf_counter()
    rasters = [rasterize_sketch(s, model.config.sketch_size) for s in sketches]
    result = detect(model, image, rasters, fusion=fusion, max_detections=max_detections)
    h, w = image.shape[:2]
    if result.cmap is not None:
        attention = upsample_attention(result.cmap, model.config.stride, (w, h))
        attention = attention.to(torch.float32).numpy()
    else:
        attention = np.zeros((h, w), dtype=np.float32)
    detections = [{"box": [float(v) for v in b], "score": float(s)}
                  for b, s in zip(result.boxes, result.scores)]
    return LocalizeResult(
        detections=detections, attention=attention,
        model_digest=model.config.digest(),
        timing_ms=(time.perf_counter() - t0) * 1000.0,
        image_size=(w, h))


def decode_image_b64(data_b64: str) -> np.ndarray:
    """Base64 lossless raster (PNG) -> (H, W, 3) float image in [0, 1]."""
    try:
        raw = base64.b64decode(data_b64, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise LocalizeError(f"could not decode image: {exc}", field_name="image_b64") from exc
    return arr / 255.0


def encode_image_b64(image: np.ndarray) -> str:
    arr = np.floor(np.clip(image, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def attention_payload(attention: np.ndarray) -> dict:
    """Flat row-major float32 array with a shape header, base64-encoded."""
    arr = np.ascontiguousarray(attention, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "float32",
        "data_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def wire_sketches_to_strokes(payload: list[dict]) -> list[StrokeSketch]:
    """Request sketches -> StrokeSketch list.

    Each entry is {"category"?: str, "drawing": [[[x ints],[y ints]], ...]}
    with coordinates quantized to 0..255; they map to [0,1] by /255 (no
    bounding-box renormalization: the drawing's canvas placement is kept).
    """
    sketches = []
    for i, entry in enumerate(payload):
        drawing = entry.get("drawing")
        if not drawing:
            raise LocalizeError(f"sketches[{i}].drawing is empty", field_name="sketches")
        strokes = []
        for stroke in drawing:
            if len(stroke) != 2 or len(stroke[0]) != len(stroke[1]):
                raise LocalizeError(
                    f"sketches[{i}] has a malformed stroke", field_name="sketches")
            xs = np.asarray(stroke[0], dtype=np.float64) / QUANT_LEVELS
            ys = np.asarray(stroke[1], dtype=np.float64) / QUANT_LEVELS
            pts = np.clip(np.stack([xs, ys], axis=1), 0.0, 1.0)
            if len(pts) == 1:
                pts = np.repeat(pts, 2, axis=0)
            strokes.append(pts)
        try:
            sketches.append(StrokeSketch(category=entry.get("category") or "", strokes=strokes))
        except ValueError as exc:
            raise LocalizeError(f"sketches[{i}]: {exc}", field_name="sketches") from exc
    return sketches
