"""Scene archive on disk: a manifest plus one lossless PNG per scene.

Manifest format, one line per scene (tab-separated):
    <id> <seed> <cat1,cat2,...> <cat,x1,y1,x2,y2;cat,x1,y1,x2,y2;...>
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box
from .scenes import CategorySplit, Scene, SceneObject

MANIFEST_NAME = "scenes.manifest"
SPLIT_NAME = "split.json"


@dataclass
class SceneRecord:
    scene_id: str
    seed: int
    scene: Scene


def _image_to_png(image: np.ndarray, path: Path):
    arr = np.floor(np.clip(image, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _png_to_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _format_boxes(objects: list[SceneObject]) -> str:
    parts = []
    for o in objects:
        b = o.box
        parts.append(f"{o.category},{b.x1:g},{b.y1:g},{b.x2:g},{b.y2:g}")
    return ";".join(parts)


def _parse_boxes(text: str) -> list[SceneObject]:
    if not text:
        return []
    out = []
    for part in text.split(";"):
        cat, x1, y1, x2, y2 = part.split(",")
        out.append(SceneObject(category=cat, box=Box(float(x1), float(y1), float(x2), float(y2))))
    return out


def write_scene_archive(records: list[SceneRecord], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        _image_to_png(rec.scene.image, directory / f"{rec.scene_id}.png")
        cats = ",".join(rec.scene.categories)
        lines.append(f"{rec.scene_id}\t{rec.seed}\t{cats}\t{_format_boxes(rec.scene.objects)}")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_scene_archive(directory) -> list[SceneRecord]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    records = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        scene_id, seed, _cats, boxes = line.split("\t")
        image = _png_to_image(directory / f"{scene_id}.png")
        scene = Scene(image=image, objects=_parse_boxes(boxes))
        records.append(SceneRecord(scene_id=scene_id, seed=int(seed), scene=scene))
    return records


def write_split(split: CategorySplit, seed: int, path) -> None:
    payload = {"seen": sorted(split.seen), "unseen": sorted(split.unseen), "seed": seed}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_split(path) -> CategorySplit:
    payload = json.loads(Path(path).read_text())
    return CategorySplit(seen=frozenset(payload["seen"]), unseen=frozenset(payload["unseen"]))
