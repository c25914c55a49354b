"""Image loading and the tile manifest format.

Registration operates on float grayscale in [0, 1]. 8-bit and 16-bit
integer images are scaled by their type maximum; RGB collapses to luma.
The manifest is a JSON document listing tile ids, image paths, and nominal
canvas offsets, plus the minimum overlap side length used to enumerate
candidate pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SchemaError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    """Any supported image array to float64 grayscale in [0, 1]."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        if arr.shape[2] != 3:
            raise ValueError(f"expected 1, 3, or 4 channels, got {arr.shape[2]}")
        arr = arr.astype(np.float64) @ LUMA_WEIGHTS
    elif arr.ndim != 2:
        raise ValueError(f"expected a 2D or 3D image array, got ndim={arr.ndim}")
    return np.asarray(arr, dtype=np.float64)


def _scale_for_dtype(arr: np.ndarray) -> float:
    if arr.dtype == np.uint8:
        return 255.0
    if arr.dtype == np.uint16:
        return 65535.0
    if np.issubdtype(arr.dtype, np.floating):
        return 1.0
    raise ValueError(f"unsupported image dtype {arr.dtype}")


def read_raw(path: str | Path) -> np.ndarray:
    """Read an image file as-is (uint8/uint16, gray or RGB)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as img:
        if img.mode == "P":
            img = img.convert("RGB")
        return np.asarray(img)


def load_image(path: str | Path) -> np.ndarray:
    """Read a grayscale or RGB PNG/TIFF into float grayscale in [0, 1]."""
    arr = read_raw(path)
    scale = _scale_for_dtype(arr)
    return to_grayscale(arr) / scale


def normalize_array(arr: np.ndarray) -> np.ndarray:
    """In-memory array (any supported dtype) to float grayscale in [0, 1]."""
    arr = np.asarray(arr)
    scale = _scale_for_dtype(arr)
    return to_grayscale(arr) / scale


@dataclass
class TileEntry:
    id: int
    path: str
    nominal_offset: tuple[float, float]


@dataclass
class TileManifest:
    """The register subcommand's input: tiles plus the pair-enumeration rule."""

    tiles: list[TileEntry]
    min_overlap_px: int = 64
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [t.id for t in self.tiles]
        if sorted(ids) != list(range(len(ids))):
            raise SchemaError("tile ids must be unique and contiguous from 0")
        self.tiles = sorted(self.tiles, key=lambda t: t.id)
        if self.min_overlap_px < 1:
            raise SchemaError(f"min_overlap_px must be >= 1, got {self.min_overlap_px}")

    def resolve_path(self, entry: TileEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p


def load_manifest(path: str | Path) -> TileManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON in {path}: {exc}")
    if not isinstance(doc, dict) or "tiles" not in doc:
        raise SchemaError("manifest must be an object with a tiles list")
    tiles = []
    if not isinstance(doc["tiles"], list):
        raise SchemaError("tiles must be a list")
    for entry in doc["tiles"]:
        if not isinstance(entry, dict) or not {"id", "path", "nominal_offset"} <= set(entry):
            raise SchemaError(f"tile entry missing fields: {entry}")
        off = entry["nominal_offset"]
        if not isinstance(off, (list, tuple)) or len(off) != 2:
            raise SchemaError(f"nominal_offset must be [x, y], got {off!r}")
        try:
            x, y = float(off[0]), float(off[1])
        except (TypeError, ValueError):
            raise SchemaError(f"nominal_offset must be numeric, got {off!r}")
        if not (math.isfinite(x) and math.isfinite(y)):
            raise SchemaError(f"nominal_offset must be finite, got {off!r}")
        tiles.append(TileEntry(id=int(entry["id"]), path=str(entry["path"]),
                               nominal_offset=(x, y)))
    min_overlap = int(doc.get("min_overlap_px", 64))
    return TileManifest(tiles=tiles, min_overlap_px=min_overlap, base_dir=path.parent)


def save_manifest(manifest: TileManifest, path: str | Path):
    doc = {
        "tiles": [
            {"id": t.id, "path": t.path, "nominal_offset": list(t.nominal_offset)}
            for t in manifest.tiles
        ],
        "min_overlap_px": manifest.min_overlap_px,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def overlapping_pairs(
    offsets: np.ndarray, shapes: dict[int, tuple[int, int]], min_overlap_px: int
) -> list[tuple[int, int]]:
    """Pairs whose nominal overlap rectangle has area >= min_overlap_px^2.

    ``offsets`` is (n, 2) in (x, y); ``shapes`` maps tile id to (height,
    width). Both overlap sides must be positive; the area rule keeps
    edge-adjacent grid neighbors (long thin overlaps) while rejecting
    corner-adjacent ones whose square overlap is below the threshold.
    """
    offsets = np.asarray(offsets, dtype=float)
    n = len(offsets)
    m = min_overlap_px
    pairs = []
    for a in range(n):
        ha, wa = shapes[a]
        for b in range(a + 1, n):
            hb, wb = shapes[b]
            ox = min(offsets[a, 0] + wa, offsets[b, 0] + wb) - max(
                offsets[a, 0], offsets[b, 0]
            )
            oy = min(offsets[a, 1] + ha, offsets[b, 1] + hb) - max(
                offsets[a, 1], offsets[b, 1]
            )
            if ox > 0 and oy > 0 and ox * oy >= m * m:
                pairs.append((a, b))
    return pairs


def candidate_pairs(
    manifest: TileManifest, shapes: dict[int, tuple[int, int]]
) -> list[tuple[int, int]]:
    """Overlap-qualified pairs for a manifest; see overlapping_pairs."""
    offsets = np.array([t.nominal_offset for t in manifest.tiles])
    return overlapping_pairs(offsets, shapes, manifest.min_overlap_px)
