"""Pairwise tile registration with multiple translation candidates.

The pipeline per tile pair: Harris corners on the first image, a windowed
normalized cross-correlation surface sampled on an integer shift grid
around the nominal relative offset, then multi-peak extraction with
sub-pixel refinement. Every surviving peak becomes one candidate in the
pair's edge bundle; ambiguity is resolved later by the global solver, not
here.

Conventions: the correlation surface lives in the "content mapping"
frame, x_B = x_A + (delta0 + shift). Bundle deltas instead express the
placement of tile j relative to tile i on the canvas, which is the
negative of the content mapping, so register_pair negates extracted
deltas when it builds the bundle.
"""

from __future__ import annotations

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter
from scipy.signal import correlate

from .errors import RegistrationError
from .graph import AlignmentMultigraph, CandidateTransform, EdgeBundle, TileNode
from .images import load_image, normalize_array, overlapping_pairs

log = logging.getLogger(__name__)

# below this, a window's sum of squared deviations counts as zero variance;
# 8-bit content has min nonzero deviation (1/255)^2 * (n-1)/n ~ 1.5e-5,
# while float cancellation residue stays under 1e-10
VAR_EPS = 1e-9

HARRIS_K = 0.04
HARRIS_SMOOTH = 5
MAX_NMS_POOL = 4096


@dataclass
class RegistrationParams:
    """Everything register_pair needs beyond the two tiles."""

    window_radius: int = 16
    search_radius: int = 32
    abs_threshold: float = 0.5
    rel_threshold: float = 0.7
    nms_radius: int = 3
    max_candidates: int = 8
    max_features: int = 64
    min_feature_distance: float = 10.0
    quality: float = 0.01

    def __post_init__(self):
        if self.window_radius < 1 or self.search_radius < 1:
            raise ValueError("window_radius and search_radius must be >= 1")
        if self.max_candidates < 1 or self.max_features < 1:
            raise ValueError("max_candidates and max_features must be >= 1")


@dataclass
class FeatureSet:
    """Corner points (x, y) all at least window_radius from the border."""

    points: np.ndarray
    window_radius: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class CorrelationSurface:
    """Mean windowed correlation on an integer shift grid around origin.

    values[s + dy, s + dx] is the score at shift (dx, dy); NaN marks grid
    cells where every feature window was excluded. counts holds the number
    of features that contributed per cell.
    """

    origin: np.ndarray
    values: np.ndarray
    n_features: int
    counts: np.ndarray = field(default=None)

    @property
    def search_radius(self) -> int:
        return (self.values.shape[0] - 1) // 2


def harris_response(image: np.ndarray) -> np.ndarray:
    """Corner response via the 5x5 box-summed gradient structure tensor."""
    gy, gx = np.gradient(np.asarray(image, dtype=float))
    sxx = uniform_filter(gx * gx, size=HARRIS_SMOOTH)
    syy = uniform_filter(gy * gy, size=HARRIS_SMOOTH)
    sxy = uniform_filter(gx * gy, size=HARRIS_SMOOTH)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return det - HARRIS_K * trace * trace


def detect_features(
    image: np.ndarray,
    max_count: int = 64,
    min_distance: float = 10.0,
    quality: float = 0.01,
    window_radius: int = 16,
) -> FeatureSet:
    """Top Harris corners, greedily spaced at least min_distance apart.

    Ranking and tie-breaks are fully deterministic: response descending,
    then row, then column. Points closer than window_radius to any border
    are never returned. Blank images yield an empty set.
    """
    img = np.asarray(image, dtype=float)
    resp = harris_response(img)
    m = window_radius
    h, w = resp.shape
    if h <= 2 * m or w <= 2 * m:
        return FeatureSet(np.zeros((0, 2)), window_radius)

    interior = np.full_like(resp, -np.inf)
    interior[m : h - m, m : w - m] = resp[m : h - m, m : w - m]

    peak = interior == maximum_filter(interior, size=3)
    rmax = interior.max()
    if not np.isfinite(rmax) or rmax <= 0:
        return FeatureSet(np.zeros((0, 2)), window_radius)
    mask = peak & (interior >= quality * rmax)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return FeatureSet(np.zeros((0, 2)), window_radius)
    scores = interior[ys, xs]

    order = np.lexsort((xs, ys, -scores))
    if order.size > MAX_NMS_POOL:
        order = order[:MAX_NMS_POOL]
    ys, xs, scores = ys[order], xs[order], scores[order]

    taken_x: list[float] = []
    taken_y: list[float] = []
    min_d2 = float(min_distance) ** 2
    for y, x in zip(ys.tolist(), xs.tolist()):
        if taken_x:
            dx = np.array(taken_x) - x
            dy = np.array(taken_y) - y
            if np.min(dx * dx + dy * dy) < min_d2:
                continue
        taken_x.append(x)
        taken_y.append(y)
        if len(taken_x) >= max_count:
            break
    pts = np.column_stack([taken_x, taken_y]).astype(float)
    return FeatureSet(pts, window_radius)


def _window_box_sums(patch: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding w-by-w window sums of patch and patch^2 via integral images."""
    p = np.pad(patch, ((1, 0), (1, 0)))
    ii1 = p.cumsum(axis=0).cumsum(axis=1)
    ii2 = (p * p).cumsum(axis=0).cumsum(axis=1)

    def box(ii):
        return ii[w:, w:] - ii[:-w, w:] - ii[w:, :-w] + ii[:-w, :-w]

    return box(ii1), box(ii2)


def correlation_surface(
    img_a: np.ndarray,
    img_b: np.ndarray,
    features: FeatureSet,
    delta0,
    search_radius: int = 32,
) -> CorrelationSurface:
    """Feature-averaged windowed Pearson correlation over the shift grid.

    For each feature point p and each integer shift d in the grid, the
    window of img_a around p is correlated against the window of img_b
    around p + delta0 + d, both windows mean-removed. Cells average over
    the features whose windows fit and have nonzero variance; a feature's
    zero-variance or out-of-bounds windows simply reduce that cell's count.
    """
    if len(features) == 0:
        raise RegistrationError("correlation requires at least one feature")
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    d0 = np.asarray(np.rint(np.asarray(delta0, dtype=float)), dtype=int).reshape(2)
    r = int(features.window_radius)
    s = int(search_radius)
    w = 2 * r + 1
    n_px = w * w
    grid = 2 * s + 1
    hb, wb = b.shape

    acc = np.zeros((grid, grid))
    cnt = np.zeros((grid, grid), dtype=int)
    geometric_hits = 0

    for fx, fy in np.rint(features.points).astype(int):
        win_a = a[fy - r : fy + r + 1, fx - r : fx + r + 1]
        if win_a.shape != (w, w):
            continue
        ta = win_a - win_a.mean()
        var_a = float(np.sum(ta * ta))

        # centers in img_b form the block [cx0..cx0+grid) x [cy0..cy0+grid)
        cx0 = fx + d0[0] - s
        cy0 = fy + d0[1] - s
        # clip to centers whose full window fits inside img_b
        gx_lo = max(0, r - cx0)
        gy_lo = max(0, r - cy0)
        gx_hi = min(grid, wb - r - cx0)
        gy_hi = min(grid, hb - r - cy0)
        if gx_lo >= gx_hi or gy_lo >= gy_hi:
            continue
        geometric_hits += 1
        if var_a <= VAR_EPS:
            continue

        py0 = cy0 + gy_lo - r
        px0 = cx0 + gx_lo - r
        py1 = cy0 + (gy_hi - 1) + r + 1
        px1 = cx0 + (gx_hi - 1) + r + 1
        patch = b[py0:py1, px0:px1]
        shifted = patch - patch.mean()

        num = correlate(shifted, ta, mode="valid", method="auto")
        s1, s2 = _window_box_sums(shifted, w)
        var_b = s2 - s1 * s1 / n_px

        valid = var_b > VAR_EPS
        vals = np.zeros_like(num)
        np.divide(num, np.sqrt(var_a * np.maximum(var_b, VAR_EPS)), out=vals, where=valid)
        block_a = acc[gy_lo:gy_hi, gx_lo:gx_hi]
        block_c = cnt[gy_lo:gy_hi, gx_lo:gx_hi]
        block_a += np.where(valid, vals, 0.0)
        block_c += valid

    if geometric_hits == 0:
        raise RegistrationError("search range lies entirely outside the overlap")

    values = np.full((grid, grid), np.nan)
    np.divide(acc, cnt, out=values, where=cnt > 0)
    np.clip(values, -1.0, 1.0, out=values)
    return CorrelationSurface(
        origin=d0.astype(float), values=values, n_features=len(features), counts=cnt
    )


def _refine_axis(lo: float, c: float, hi: float) -> tuple[float, float]:
    """Quadratic peak fit through three samples: (offset in [-0.5, 0.5], gain)."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 0.0
    denom = lo - 2.0 * c + hi
    if denom >= -1e-12:
        return 0.0, 0.0
    offset = (lo - hi) / (2.0 * denom)
    offset = min(0.5, max(-0.5, offset))
    # parabola value at the (possibly clamped) offset, relative to the center
    a = 0.5 * denom
    b = 0.5 * (hi - lo)
    gain = b * offset + a * offset * offset
    return offset, gain


def extract_candidates(
    surface: CorrelationSurface,
    abs_threshold: float = 0.5,
    rel_threshold: float = 0.7,
    nms_radius: int = 3,
    max_candidates: int = 8,
) -> list[CandidateTransform]:
    """Thresholded strict local maxima of the surface, refined to sub-pixel.

    A peak must clear both the absolute score floor and the fraction of the
    global maximum; surviving peaks are suppressed within nms_radius of a
    stronger one, sorted by score, and capped. Deltas are expressed in the
    surface's own frame (origin plus grid shift plus sub-pixel offset).
    """
    v = surface.values
    grid = v.shape[0]
    s = surface.search_radius
    finite = np.isfinite(v)
    if not finite.any():
        return []
    vmax = np.nanmax(v)
    floor = max(abs_threshold, rel_threshold * vmax)

    padded = np.full((grid + 2, grid + 2), -np.inf)
    padded[1:-1, 1:-1] = np.where(finite, v, -np.inf)
    center = padded[1:-1, 1:-1]
    strict = np.ones_like(center, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = padded[1 + dy : grid + 1 + dy, 1 + dx : grid + 1 + dx]
            strict &= center > neighbor
    m = strict & finite & (v >= floor)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return []
    scores = v[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    ys, xs, scores = ys[order], xs[order], scores[order]

    keep_y, keep_x = [], []
    r2 = float(nms_radius) ** 2
    for y, x in zip(ys.tolist(), xs.tolist()):
        if keep_x:
            dx = np.array(keep_x) - x
            dy = np.array(keep_y) - y
            if np.min(dx * dx + dy * dy) <= r2:
                continue
        keep_y.append(y)
        keep_x.append(x)
        if len(keep_x) >= max_candidates:
            break

    cands = []
    for y, x in zip(keep_y, keep_x):
        c = v[y, x]
        lo_x = v[y, x - 1] if x > 0 and finite[y, x - 1] else math.nan
        hi_x = v[y, x + 1] if x + 1 < grid and finite[y, x + 1] else math.nan
        lo_y = v[y - 1, x] if y > 0 and finite[y - 1, x] else math.nan
        hi_y = v[y + 1, x] if y + 1 < grid and finite[y + 1, x] else math.nan
        off_x, gain_x = _refine_axis(lo_x, c, hi_x)
        off_y, gain_y = _refine_axis(lo_y, c, hi_y)
        score = min(1.0, max(-1.0, c + gain_x + gain_y))
        delta = surface.origin + np.array([x - s + off_x, y - s + off_y])
        support = int(surface.counts[y, x]) if surface.counts is not None else 1
        cands.append(CandidateTransform(delta=delta, score=score, support=max(1, support)))
    return cands


def _tile_image(tile: TileNode) -> np.ndarray:
    if isinstance(tile.image_ref, np.ndarray):
        return normalize_array(tile.image_ref)
    return load_image(tile.image_ref)


class PairRegistrar:
    """Registers pairs against a per-tile feature/image cache.

    The cache is guarded for concurrent readers so pairs can be processed
    in parallel threads; each tile's features are computed once.
    """

    def __init__(self, params: RegistrationParams | None = None):
        self.params = params or RegistrationParams()
        self._lock = threading.Lock()
        self._images: dict[int, np.ndarray] = {}
        self._features: dict[int, FeatureSet] = {}

    def _get(self, tile: TileNode) -> tuple[np.ndarray, FeatureSet]:
        with self._lock:
            cached = tile.id in self._images
        if not cached:
            img = _tile_image(tile)
            feats = detect_features(
                img,
                max_count=self.params.max_features,
                min_distance=self.params.min_feature_distance,
                quality=self.params.quality,
                window_radius=self.params.window_radius,
            )
            with self._lock:
                self._images.setdefault(tile.id, img)
                self._features.setdefault(tile.id, feats)
        with self._lock:
            return self._images[tile.id], self._features[tile.id]

    def register(self, tile_a: TileNode, tile_b: TileNode) -> EdgeBundle | None:
        if tile_a.id >= tile_b.id:
            raise ValueError("pass tiles in ascending id order")
        p = self.params
        img_a, feats = self._get(tile_a)
        img_b, _ = self._get(tile_b)
        if len(feats) == 0:
            log.info("pair (%d,%d): no features, skipped", tile_a.id, tile_b.id)
            return None
        # content mapping frame: x_B = x_A + (nominal_A - nominal_B)
        d0 = tile_a.nominal_offset - tile_b.nominal_offset
        try:
            surface = correlation_surface(
                img_a, img_b, feats, d0, search_radius=p.search_radius
            )
        except RegistrationError as exc:
            log.info("pair (%d,%d): %s, skipped", tile_a.id, tile_b.id, exc)
            return None
        cands = extract_candidates(
            surface,
            abs_threshold=p.abs_threshold,
            rel_threshold=p.rel_threshold,
            nms_radius=p.nms_radius,
            max_candidates=p.max_candidates,
        )
        if not cands:
            log.info("pair (%d,%d): no candidates above threshold", tile_a.id, tile_b.id)
            return None
        flipped = [
            CandidateTransform(delta=-c.delta, score=c.score, support=c.support)
            for c in cands
        ]
        return EdgeBundle(i=tile_a.id, j=tile_b.id, candidates=flipped)


def register_pair(
    tile_a: TileNode, tile_b: TileNode, params: RegistrationParams | None = None
) -> EdgeBundle | None:
    """One-shot pair registration; see PairRegistrar for the cached variant."""
    return PairRegistrar(params).register(tile_a, tile_b)


def register_all(
    nodes: list[TileNode],
    min_overlap_px: int = 64,
    params: RegistrationParams | None = None,
    tau: float = 5.0,
    threads: int = 1,
) -> AlignmentMultigraph:
    """Register every overlap-qualified pair into a fresh multigraph.

    Pair registrations are independent; with threads > 1 they run in a
    thread pool, and bundles are sorted by (i, j) afterward so the output
    is identical regardless of scheduling.
    """
    registrar = PairRegistrar(params)
    shapes = {}
    for node in nodes:
        img, _ = registrar._get(node)
        shapes[node.id] = img.shape
    offsets = np.array([n.nominal_offset for n in nodes])
    pairs = overlapping_pairs(offsets, shapes, min_overlap_px)
    if not pairs:
        raise RegistrationError("no overlapping pairs in the tile set")

    by_id = {n.id: n for n in nodes}
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda ij: registrar.register(by_id[ij[0]], by_id[ij[1]]), pairs)
            )
    else:
        results = [registrar.register(by_id[i], by_id[j]) for i, j in pairs]

    bundles = sorted(
        (b for b in results if b is not None), key=lambda b: (b.i, b.j)
    )
    log.info(
        "registered %d/%d pairs (%d skipped)",
        len(bundles), len(pairs), len(pairs) - len(bundles),
    )
    return AlignmentMultigraph(nodes=nodes, bundles=bundles, tau=tau)


def sequential_ransac(
    correspondences: list[tuple],
    inlier_tol: float = 2.0,
    min_support: int = 3,
    max_sets: int = 8,
) -> list[CandidateTransform]:
    """Peel off translation consensus sets from matched point pairs.

    Every remaining correspondence is tried as a 1-point hypothesis; the
    largest consensus becomes a candidate (delta = inlier mean, support =
    inlier count, score = inlier fraction of the original input), its
    inliers are removed, and the search repeats. Deterministic: hypothesis
    ties break toward the earliest correspondence.
    """
    if not correspondences:
        return []
    pts_a = np.array([np.asarray(a, dtype=float) for a, _ in correspondences])
    pts_b = np.array([np.asarray(b, dtype=float) for _, b in correspondences])
    deltas = pts_b - pts_a
    total = len(deltas)
    alive = np.ones(total, dtype=bool)
    tol2 = float(inlier_tol) ** 2

    out = []
    while alive.any() and len(out) < max_sets:
        idx = np.flatnonzero(alive)
        live = deltas[idx]
        diff = live[:, None, :] - live[None, :, :]
        inliers = np.sum(diff * diff, axis=2) <= tol2
        counts = inliers.sum(axis=1)
        best = int(np.argmax(counts))
        support = int(counts[best])
        if support < min_support:
            break
        members = idx[inliers[best]]
        centroid = deltas[members].mean(axis=0)
        out.append(
            CandidateTransform(
                delta=centroid, score=support / total, support=support
            )
        )
        alive[members] = False
    return out
