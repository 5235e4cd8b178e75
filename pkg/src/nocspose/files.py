"""PNG and JSON sidecar helpers shared by the map, depth and render exporters."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def write_rgb8(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, np.uint8)).save(path)


def write_gray8(path, gray: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(gray, np.uint8)).save(path)


def write_gray16(path, gray: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(gray, np.uint16))
    img.save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            return np.asarray(img, dtype=np.uint16)
        return np.asarray(img)


def save_depth(path, counts: np.ndarray, scale: float) -> None:
    """16-bit depth PNG plus ``<path>.json`` carrying the units-per-count scale."""
    path = Path(path)
    write_gray16(path, counts)
    path.with_suffix(".json").write_text(json.dumps({"scale": float(scale)}))


def load_depth(path) -> np.ndarray:
    """Depth in model units; holes (count 0) come back as 0."""
    path = Path(path)
    counts = read_png(path).astype(np.float64)
    scale = json.loads(path.with_suffix(".json").read_text())["scale"]
    return counts * scale


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
