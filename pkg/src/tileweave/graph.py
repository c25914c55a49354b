"""Connectivity multigraph for tile mosaics.

Nodes carry per-tile canvas offsets, bundles carry all plausible pairwise
translation candidates between a tile pair plus one dummy hypothesis, and
this module owns the linear constraint machinery (the 0/1 constraint matrix
and its block null-space basis) that keeps each bundle's weights summing to
one during optimization.

Coordinate convention used throughout the package: a tile's offset is the
pixel position of its origin on the composite canvas (x right, y down), and
a candidate delta for a pair (i, j) with i < j is the position of tile j
relative to tile i. A candidate is consistent with node offsets when
``delta + offset_i - offset_j == 0``.

Graphs are treated as immutable once built; ``add_bundle`` and weight
updates are single-writer operations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import SchemaError

WEIGHT_SUM_TOL = 1e-9
WEIGHT_SUM_TOL_JSON = 1e-6


def _vec2(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (2,):
        raise ValueError(f"{name} must be a 2-vector, got shape {np.shape(value)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


@dataclass
class TileNode:
    """One tile: image reference, stage-position prior, solved position.

    ``image_ref`` is either a filesystem path or an in-memory array; the
    graph itself never touches pixels.
    """

    id: int
    image_ref: str | Path | np.ndarray
    nominal_offset: np.ndarray
    solved_offset: np.ndarray | None = None

    def __post_init__(self):
        self.nominal_offset = _vec2(self.nominal_offset, "nominal_offset")
        if self.solved_offset is not None:
            self.solved_offset = _vec2(self.solved_offset, "solved_offset")
        if self.id < 0:
            raise ValueError(f"node id must be non-negative, got {self.id}")


@dataclass
class CandidateTransform:
    """One pairwise translation hypothesis with its correlation evidence."""

    delta: np.ndarray
    score: float
    support: int = 1

    def __post_init__(self):
        self.delta = _vec2(self.delta, "delta")
        self.score = float(self.score)
        if not -1.0 <= self.score <= 1.0 or not math.isfinite(self.score):
            raise ValueError(f"score must lie in [-1, 1], got {self.score}")
        self.support = int(self.support)
        if self.support < 1:
            raise ValueError(f"support must be >= 1, got {self.support}")


@dataclass
class EdgeBundle:
    """All candidates between one tile pair plus the dummy hypothesis.

    ``weights`` has one entry per candidate plus the dummy at index 0 and
    sums to one. When omitted it is initialized uniform.
    """

    i: int
    j: int
    candidates: list[CandidateTransform]
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.i >= self.j:
            raise ValueError(f"bundle requires i < j, got ({self.i}, {self.j})")
        if len(self.candidates) < 1:
            raise ValueError("bundle requires at least one candidate")
        if self.weights is None:
            self.weights = np.full(self.size, 1.0 / self.size)
        else:
            self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
            self._check_weights(self.weights, WEIGHT_SUM_TOL)

    @property
    def size(self) -> int:
        """Number of weights: candidate count plus the dummy."""
        return len(self.candidates) + 1

    def _check_weights(self, w: np.ndarray, tol: float):
        if w.shape != (self.size,):
            raise ValueError(
                f"bundle ({self.i},{self.j}) needs {self.size} weights, got {w.shape}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError(f"bundle ({self.i},{self.j}) has non-finite weights")
        if abs(w.sum() - 1.0) > tol:
            raise ValueError(
                f"bundle ({self.i},{self.j}) weights sum to {w.sum():.12g}, not 1"
            )

    def argmax_choice(self) -> int:
        """Index of the winning hypothesis: 0 for the dummy, k for candidate k.

        Ties break toward the dummy, then toward the lowest candidate index.
        """
        w = self.weights
        best = 0
        for k in range(1, self.size):
            if w[k] > w[best]:
                best = k
        return best


@dataclass
class AlignmentMultigraph:
    """The object the solver consumes: tiles, bundles, and the dummy cost tau."""

    nodes: list[TileNode]
    bundles: list[EdgeBundle] = field(default_factory=list)
    tau: float = 5.0
    solved: bool = False

    def __post_init__(self):
        self.tau = float(self.tau)
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        ids = [n.id for n in self.nodes]
        if sorted(ids) != list(range(len(ids))):
            raise ValueError("node ids must be unique and contiguous from 0")
        self.nodes = sorted(self.nodes, key=lambda n: n.id)
        seen = set()
        for b in self.bundles:
            self._check_bundle(b, seen)
            seen.add((b.i, b.j))

    def _check_bundle(self, bundle: EdgeBundle, seen: set):
        n = len(self.nodes)
        if bundle.j >= n:
            raise ValueError(f"bundle ({bundle.i},{bundle.j}) references unknown node")
        if (bundle.i, bundle.j) in seen:
            raise ValueError(f"duplicate bundle for pair ({bundle.i},{bundle.j})")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def bundle_sizes(self) -> np.ndarray:
        return np.array([b.size for b in self.bundles], dtype=int)

    def flat_weights(self) -> np.ndarray:
        """All bundle weights concatenated bundle-major, dummy first."""
        if not self.bundles:
            return np.zeros(0)
        return np.concatenate([b.weights for b in self.bundles])

    def set_flat_weights(self, w: np.ndarray):
        w = np.asarray(w, dtype=float)
        off = 0
        for b in self.bundles:
            chunk = w[off : off + b.size]
            b._check_weights(chunk, WEIGHT_SUM_TOL)
            b.weights = chunk.copy()
            off += b.size
        if off != w.size:
            raise ValueError(f"weight vector length {w.size} != expected {off}")


def add_bundle(graph: AlignmentMultigraph, bundle: EdgeBundle) -> AlignmentMultigraph:
    """Append a bundle, rejecting duplicate pairs. Returns the graph."""
    graph._check_bundle(bundle, {(b.i, b.j) for b in graph.bundles})
    graph.bundles.append(bundle)
    return graph


def constraint_matrix(graph: AlignmentMultigraph) -> sp.csr_matrix:
    """0/1 matrix J with one row per bundle, one column per weight.

    J @ w equals the all-ones vector for any valid weight vector, which is
    the per-bundle sum-to-one constraint in matrix form.
    """
    sizes = graph.bundle_sizes()
    n_rows = len(sizes)
    n_cols = int(sizes.sum())
    rows = np.repeat(np.arange(n_rows), sizes)
    cols = np.arange(n_cols)
    data = np.ones(n_cols)
    return sp.csr_matrix((data, (rows, cols)), shape=(n_rows, n_cols))


def _helmert_block(m: int) -> np.ndarray:
    """m x (m-1) orthonormal basis of the hyperplane orthogonal to ones."""
    block = np.zeros((m, m - 1))
    for k in range(m - 1):
        norm = math.sqrt((k + 1) * (k + 2))
        block[: k + 1, k] = 1.0 / norm
        block[k + 1, k] = -(k + 1) / norm
    return block


def nullspace_basis(J: sp.spmatrix) -> sp.csr_matrix:
    """Block-diagonal orthonormal basis Z of the null space of J.

    One block per bundle; each block spans the directions that leave the
    bundle's weight sum unchanged. Only the properties (Z^T Z = I, J Z = 0)
    are contractual, not the entries.
    """
    J = sp.csr_matrix(J)
    sizes = np.diff(J.indptr)
    expected = np.arange(J.shape[1])
    if J.shape[0] and not np.array_equal(J.indices, expected):
        raise ValueError("J must have contiguous bundle-major column blocks")
    blocks = [_helmert_block(int(m)) for m in sizes]
    if not blocks:
        return sp.csr_matrix((J.shape[1], 0))
    return sp.block_diag(blocks, format="csr")


def project_to_nullspace(graph: AlignmentMultigraph, g: np.ndarray) -> np.ndarray:
    """Apply Z Z^T to a flat weight-space vector without forming Z.

    Z Z^T is, per bundle, the projector I - ones ones^T / m: subtracting each
    bundle's mean is exactly the projection onto the constraint null space.
    """
    out = np.array(g, dtype=float, copy=True)
    off = 0
    for b in graph.bundles:
        chunk = out[off : off + b.size]
        chunk -= chunk.mean()
        off += b.size
    return out


def to_json(graph: AlignmentMultigraph) -> dict:
    """Graph as a JSON-serializable document."""
    nodes = []
    for n in graph.nodes:
        if isinstance(n.image_ref, np.ndarray):
            image = f"memory://{n.id}"
        else:
            image = str(n.image_ref)
        nodes.append(
            {"id": n.id, "image": image, "nominal_offset": list(map(float, n.nominal_offset))}
        )
    bundles = []
    for b in graph.bundles:
        bundles.append(
            {
                "i": b.i,
                "j": b.j,
                "candidates": [
                    {
                        "dx": float(c.delta[0]),
                        "dy": float(c.delta[1]),
                        "score": float(c.score),
                        "support": int(c.support),
                    }
                    for c in b.candidates
                ],
                "weights": list(map(float, b.weights)),
            }
        )
    doc = {"tau": float(graph.tau), "nodes": nodes, "bundles": bundles}
    if graph.solved:
        doc["solved"] = True
    return doc


def _require(cond: bool, msg: str):
    if not cond:
        raise SchemaError(msg)


def from_json(doc: dict) -> AlignmentMultigraph:
    """Parse and validate a graph document. Unknown fields are ignored.

    Weight sums are accepted within 1e-6 and renormalized to restore the
    exact internal invariant.
    """
    _require(isinstance(doc, dict), "graph document must be an object")
    _require("tau" in doc and "nodes" in doc and "bundles" in doc,
             "graph document needs tau, nodes, bundles")
    try:
        tau = float(doc["tau"])
    except (TypeError, ValueError):
        raise SchemaError(f"tau must be a number, got {doc['tau']!r}")
    _require(math.isfinite(tau) and tau > 0, f"tau must be positive, got {tau}")

    nodes = []
    _require(isinstance(doc["nodes"], list), "nodes must be a list")
    for entry in doc["nodes"]:
        _require(isinstance(entry, dict), "node entries must be objects")
        _require({"id", "image", "nominal_offset"} <= set(entry),
                 f"node entry missing fields: {entry}")
        off = entry["nominal_offset"]
        _require(isinstance(off, (list, tuple)) and len(off) == 2,
                 f"nominal_offset must be [x, y], got {off!r}")
        try:
            node = TileNode(id=int(entry["id"]), image_ref=str(entry["image"]),
                            nominal_offset=off)
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc))
        nodes.append(node)

    bundles = []
    _require(isinstance(doc["bundles"], list), "bundles must be a list")
    for entry in doc["bundles"]:
        _require(isinstance(entry, dict), "bundle entries must be objects")
        _require({"i", "j", "candidates", "weights"} <= set(entry),
                 f"bundle entry missing fields: {sorted(entry)}")
        cands = []
        _require(isinstance(entry["candidates"], list) and entry["candidates"],
                 "bundle candidates must be a non-empty list")
        for c in entry["candidates"]:
            _require(isinstance(c, dict) and {"dx", "dy", "score"} <= set(c),
                     f"candidate missing fields: {c}")
            try:
                cands.append(
                    CandidateTransform(
                        delta=[float(c["dx"]), float(c["dy"])],
                        score=float(c["score"]),
                        support=int(c.get("support", 1)),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise SchemaError(str(exc))
        weights = np.asarray(entry["weights"], dtype=float).reshape(-1)
        _require(weights.size == len(cands) + 1,
                 f"bundle ({entry['i']},{entry['j']}) needs {len(cands) + 1} weights")
        _require(bool(np.all(np.isfinite(weights))), "weights must be finite")
        total = weights.sum()
        _require(abs(total - 1.0) <= WEIGHT_SUM_TOL_JSON,
                 f"bundle ({entry['i']},{entry['j']}) weights sum to {total:.8g}")
        try:
            bundles.append(
                EdgeBundle(i=int(entry["i"]), j=int(entry["j"]),
                           candidates=cands, weights=weights / total)
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc))

    try:
        graph = AlignmentMultigraph(nodes=nodes, bundles=bundles, tau=tau,
                                    solved=bool(doc.get("solved", False)))
    except ValueError as exc:
        raise SchemaError(str(exc))
    return graph


def save_graph(graph: AlignmentMultigraph, path: str | Path):
    Path(path).write_text(json.dumps(to_json(graph), indent=1))


def load_graph(path: str | Path) -> AlignmentMultigraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON in {path}: {exc}")
    return from_json(doc)
