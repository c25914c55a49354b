"""Synthetic scenes with ground truth, plus baseline alignment and metrics.

A scene is painted from rectangular texture regions (blank fill, exact-period
grid lines, band-limited noise thresholded into blobs), then cut into an
overlapping tile grid whose true positions carry Gaussian jitter that the
manifest's nominal offsets withhold. Everything is seeded and deterministic.

The baseline aligner mimics the standard approach: keep each pair's single
strongest correlation candidate above a threshold and least-squares align,
with no multigraph arbitration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from .align import (
    AlignmentResult,
    SimpleEdge,
    SimpleGraph,
    connected_components,
    global_align,
    rms_error,
)
from .graph import AlignmentMultigraph, TileNode
from .images import TileEntry, TileManifest, save_manifest

log = logging.getLogger(__name__)

BLOB_SIGMA = 6.0


@dataclass
class Region:
    """One painted rectangle. bounds = (x0, y0, x1, y1), half-open."""

    kind: str
    bounds: tuple[int, int, int, int]
    period: int = 20
    density: float = 0.25
    contrast: float = 0.5

    def __post_init__(self):
        if self.kind not in ("blank", "periodic", "blob_noise"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind == "periodic" and self.period < 4:
            raise ValueError(f"period must be >= 4 px, got {self.period}")


@dataclass
class SceneSpec:
    width: int
    height: int
    regions: list[Region] = field(default_factory=list)
    seed: int = 0
    background: float = 0.2

    def __post_init__(self):
        for r in self.regions:
            x0, y0, x1, y1 = r.bounds
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValueError(f"region bounds {r.bounds} exceed canvas")


def generate_scene(spec: SceneSpec) -> np.ndarray:
    """Paint regions in listed order onto the background. Deterministic."""
    rng = np.random.default_rng(spec.seed)
    img = np.full((spec.height, spec.width), spec.background)
    for region in spec.regions:
        x0, y0, x1, y1 = region.bounds
        h, w = y1 - y0, x1 - x0
        if region.kind == "blank":
            img[y0:y1, x0:x1] = spec.background
        elif region.kind == "periodic":
            yy, xx = np.mgrid[0:h, 0:w]
            lines = ((xx % region.period) == 0) | ((yy % region.period) == 0)
            img[y0:y1, x0:x1] = spec.background + region.contrast * lines
        else:
            f = gaussian_filter(rng.standard_normal((h, w)), BLOB_SIGMA)
            f = (f - f.mean()) / max(f.std(), 1e-12)
            thr = np.quantile(f, 1.0 - region.density)
            blob = f > thr
            inner = np.clip(f - thr, 0.0, 1.0)
            tex = spec.background + region.contrast * (0.7 + 0.3 * inner)
            img[y0:y1, x0:x1] = np.where(blob, tex, img[y0:y1, x0:x1])
    return np.clip(img, 0.0, 1.0)


@dataclass
class GroundTruth:
    """What cut_tiles knows and the manifest withholds."""

    true_offsets: np.ndarray
    grid_shape: tuple[int, int]
    overlap: int
    jitter_sigma: float
    noise_sigma: float

    def __post_init__(self):
        self.true_offsets = np.asarray(self.true_offsets, dtype=float).reshape(-1, 2)


def cut_tiles(
    scene: np.ndarray,
    grid_rows: int,
    grid_cols: int,
    tile_size: int,
    overlap: int,
    jitter_sigma: float = 0.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> tuple[list[np.ndarray], np.ndarray, GroundTruth]:
    """Cut a jittered overlapping grid of tiles out of a scene.

    Returns (tiles, nominal_offsets, truth). Nominal offsets are the exact
    grid; true offsets add per-tile Gaussian jitter (clipped at 4 sigma so
    samples stay inside the scene margin). Tiles are sampled bilinearly at
    their true sub-pixel positions, then get additive Gaussian intensity
    noise. Row-major tile order.
    """
    if overlap >= tile_size:
        raise ValueError("overlap must be smaller than tile_size")
    stride = tile_size - overlap
    margin = int(math.ceil(4.0 * jitter_sigma))
    span_x = (grid_cols - 1) * stride + tile_size
    span_y = (grid_rows - 1) * stride + tile_size
    h, w = scene.shape
    if span_x + 2 * margin > w or span_y + 2 * margin > h:
        raise ValueError(
            f"tiles exceed scene: need {span_x + 2 * margin}x{span_y + 2 * margin}, "
            f"scene is {w}x{h}"
        )

    rng = np.random.default_rng(seed)
    n = grid_rows * grid_cols
    nominal = np.zeros((n, 2))
    for r in range(grid_rows):
        for c in range(grid_cols):
            nominal[r * grid_cols + c] = (c * stride, r * stride)
    jitter = rng.normal(0.0, jitter_sigma, size=(n, 2)) if jitter_sigma > 0 else np.zeros((n, 2))
    np.clip(jitter, -4.0 * jitter_sigma, 4.0 * jitter_sigma, out=jitter)
    truth_offsets = nominal + jitter

    base_y, base_x = np.mgrid[0:tile_size, 0:tile_size].astype(float)
    tiles = []
    for t in range(n):
        px, py = truth_offsets[t] + margin
        tile = map_coordinates(
            scene, [base_y + py, base_x + px], order=1, mode="constant", cval=0.0
        )
        if noise_sigma > 0:
            tile = tile + rng.normal(0.0, noise_sigma, size=tile.shape)
        tiles.append(np.clip(tile, 0.0, 1.0))

    truth = GroundTruth(
        true_offsets=truth_offsets,
        grid_shape=(grid_rows, grid_cols),
        overlap=overlap,
        jitter_sigma=jitter_sigma,
        noise_sigma=noise_sigma,
    )
    return tiles, nominal, truth


def as_tile_nodes(tiles: list[np.ndarray], nominal: np.ndarray) -> list[TileNode]:
    return [
        TileNode(id=t, image_ref=tiles[t], nominal_offset=nominal[t])
        for t in range(len(tiles))
    ]


def write_tiles(
    tiles: list[np.ndarray],
    nominal: np.ndarray,
    out_dir,
    min_overlap_px: int = 64,
):
    """Save tiles as 8-bit PNGs plus a manifest JSON; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for t, tile in enumerate(tiles):
        name = f"tile_{t:03d}.png"
        arr = np.clip(np.rint(tile * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(out / name)
        entries.append(
            TileEntry(id=t, path=name, nominal_offset=(float(nominal[t, 0]), float(nominal[t, 1])))
        )
    manifest = TileManifest(tiles=entries, min_overlap_px=min_overlap_px, base_dir=out)
    path = out / "manifest.json"
    save_manifest(manifest, path)
    return path


# --- baseline and metrics ------------------------------------------------------


def baseline_prune(graph: AlignmentMultigraph, abs_threshold: float) -> SimpleGraph:
    """Top-1 candidate per bundle, kept only above the score threshold.

    No multigraph arbitration: the dummy plays no role and every retained
    edge gets unit weight. Score ties break toward the lowest index.
    """
    edges = []
    dropped = 0
    for b in graph.bundles:
        best = 0
        for k in range(1, len(b.candidates)):
            if b.candidates[k].score > b.candidates[best].score:
                best = k
        cand = b.candidates[best]
        if cand.score >= abs_threshold:
            edges.append(
                SimpleEdge(i=b.i, j=b.j, delta=cand.delta.copy(), weight=1.0, choice=best + 1)
            )
        else:
            dropped += 1
    return SimpleGraph(nodes=graph.nodes, edges=edges, dropped=dropped)


def run_baseline(
    graph: AlignmentMultigraph, abs_threshold: float = 0.5
) -> tuple[SimpleGraph, AlignmentResult]:
    """Strongest-candidate selection plus direct global alignment."""
    simple = baseline_prune(graph, abs_threshold)
    offsets = global_align(simple)
    rms = rms_error(simple, offsets) if simple.edges else 0.0
    result = AlignmentResult(
        offsets=offsets,
        rms=rms,
        edges_retained=len(simple.edges),
        edges_dropped=simple.dropped,
        components=connected_components(simple),
    )
    return simple, result


def truth_rms(
    offsets: np.ndarray, components: list[list[int]], truth_offsets: np.ndarray
) -> float:
    """Ground-truth placement error, gauge-removed per component.

    Each component's lowest-id node serves as its reference; errors are
    differences of relative placements, so a rigid shift of a whole
    component costs nothing.
    """
    offsets = np.asarray(offsets, dtype=float)
    truth_offsets = np.asarray(truth_offsets, dtype=float)
    sq = 0.0
    for comp in components:
        ref = comp[0]
        for i in comp:
            e = (offsets[i] - offsets[ref]) - (truth_offsets[i] - truth_offsets[ref])
            sq += float(e @ e)
    return float(np.sqrt(sq / len(offsets)))


@dataclass
class EvalMetrics:
    rms_internal: float
    rms_truth: float
    edges_retained: int
    edges_dropped: int
    n_components: int
    mismatched_selections: int = 0

    def to_json(self) -> dict:
        return {
            "rms_internal": float(self.rms_internal),
            "rms_truth": float(self.rms_truth),
            "edges_retained": int(self.edges_retained),
            "edges_dropped": int(self.edges_dropped),
            "components": int(self.n_components),
            "mismatched_selections": int(self.mismatched_selections),
        }


def count_mismatched_selections(
    graph: AlignmentMultigraph, simple: SimpleGraph
) -> int:
    """Retained edges whose selected candidate is not the top-correlation one."""
    top = {}
    for b in graph.bundles:
        best = 0
        for k in range(1, len(b.candidates)):
            if b.candidates[k].score > b.candidates[best].score:
                best = k
        top[(b.i, b.j)] = best + 1
    return sum(1 for e in simple.edges if top.get((e.i, e.j)) != e.choice)


def evaluate(
    result: AlignmentResult,
    truth: GroundTruth,
    graph: AlignmentMultigraph | None = None,
    simple: SimpleGraph | None = None,
) -> EvalMetrics:
    """Score an alignment against ground truth."""
    if len(result.offsets) != len(truth.true_offsets):
        raise ValueError(
            f"tile sets differ: {len(result.offsets)} offsets vs "
            f"{len(truth.true_offsets)} truth entries"
        )
    mismatched = 0
    if graph is not None and simple is not None:
        mismatched = count_mismatched_selections(graph, simple)
    return EvalMetrics(
        rms_internal=result.rms,
        rms_truth=truth_rms(result.offsets, result.components, truth.true_offsets),
        edges_retained=result.edges_retained,
        edges_dropped=result.edges_dropped,
        n_components=len(result.components),
        mismatched_selections=mismatched,
    )
