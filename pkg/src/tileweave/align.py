"""Pruning the solved multigraph and weighted global alignment.

Pruning keeps, per bundle, only the hypothesis with the largest weight;
when the dummy wins the whole edge is dropped. Global alignment then solves
the weighted least-squares placement problem on the surviving simple graph,
pinning the lowest-id node of each connected component to its nominal
offset so disconnected islands land at their stage positions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import StitchError
from .graph import AlignmentMultigraph, TileNode
from .topo import connected_components as _components

log = logging.getLogger(__name__)


@dataclass
class SimpleEdge:
    i: int
    j: int
    delta: np.ndarray
    weight: float
    choice: int = 1


@dataclass
class SimpleGraph:
    """At most one surviving translation per tile pair."""

    nodes: list[TileNode]
    edges: list[SimpleEdge]
    dropped: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def prune(graph: AlignmentMultigraph) -> SimpleGraph:
    """Per-bundle argmax across dummy and candidates; dummy wins drop the edge.

    Ties break toward the dummy, then toward the lowest candidate index, so
    ambiguous evidence never forces an edge.
    """
    if not graph.solved:
        raise StitchError("graph weights are unsolved; run solve before prune")
    edges = []
    dropped = 0
    for b in graph.bundles:
        choice = b.argmax_choice()
        if choice == 0:
            dropped += 1
            continue
        cand = b.candidates[choice - 1]
        edges.append(
            SimpleEdge(
                i=b.i, j=b.j, delta=cand.delta.copy(),
                weight=float(b.weights[choice]), choice=choice,
            )
        )
    return SimpleGraph(nodes=graph.nodes, edges=edges, dropped=dropped)


def connected_components(simple: SimpleGraph) -> list[list[int]]:
    return _components(simple.n_nodes, [(e.i, e.j) for e in simple.edges])


def global_align(simple: SimpleGraph) -> np.ndarray:
    """Weighted least-squares placements, reference node pinned per component.

    Minimizes sum over edges of w^2 ||delta + h_i - h_j||^2. The two axes
    decouple, so each is one sparse SPD normal-equation solve over the free
    nodes of the component.
    """
    n = simple.n_nodes
    offsets = np.array([node.nominal_offset for node in simple.nodes], dtype=float)
    comps = connected_components(simple)
    pinned = np.zeros(n, dtype=bool)
    for comp in comps:
        pinned[comp[0]] = True

    free = np.flatnonzero(~pinned)
    if free.size == 0 or not simple.edges:
        return offsets
    slot = -np.ones(n, dtype=int)
    slot[free] = np.arange(free.size)

    rows, cols, vals = [], [], []
    rhs = np.zeros((free.size, 2))
    for e in simple.edges:
        w2 = e.weight**2
        si, sj = slot[e.i], slot[e.j]
        # residual delta + h_i - h_j: normal equations per axis
        if si >= 0:
            rows.append(si)
            cols.append(si)
            vals.append(w2)
            rhs[si] -= w2 * e.delta
        if sj >= 0:
            rows.append(sj)
            cols.append(sj)
            vals.append(w2)
            rhs[sj] += w2 * e.delta
        if si >= 0 and sj >= 0:
            rows.extend([si, sj])
            cols.extend([sj, si])
            vals.extend([-w2, -w2])
        elif si >= 0:
            rhs[si] += w2 * offsets[e.j]
        elif sj >= 0:
            rhs[sj] += w2 * offsets[e.i]
    A = sp.csr_matrix((vals, (rows, cols)), shape=(free.size, free.size))
    solver = spla.factorized(A.tocsc())
    for axis in range(2):
        offsets[free, axis] = solver(rhs[:, axis])
    return offsets


def rms_error(simple: SimpleGraph, offsets: np.ndarray) -> float:
    """Root mean square residual over retained edges, unweighted."""
    if not simple.edges:
        raise StitchError("rms undefined: no retained edges")
    offsets = np.asarray(offsets, dtype=float)
    sq = 0.0
    for e in simple.edges:
        r = e.delta + offsets[e.i] - offsets[e.j]
        sq += float(r @ r)
    return float(np.sqrt(sq / len(simple.edges)))


@dataclass
class AlignmentResult:
    offsets: np.ndarray
    rms: float
    edges_retained: int
    edges_dropped: int
    components: list[list[int]]

    def to_json(self) -> dict:
        return {
            "offsets": [[float(x), float(y)] for x, y in self.offsets],
            "rms": float(self.rms),
            "edges_retained": int(self.edges_retained),
            "edges_dropped": int(self.edges_dropped),
            "components": [[int(v) for v in comp] for comp in self.components],
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def align(graph: AlignmentMultigraph) -> tuple[SimpleGraph, AlignmentResult]:
    """Prune then globally align; the standard post-solve pipeline stage."""
    simple = prune(graph)
    offsets = global_align(simple)
    rms = rms_error(simple, offsets) if simple.edges else 0.0
    if not simple.edges:
        log.warning("pruned graph has no edges; placements fall back to nominal")
    result = AlignmentResult(
        offsets=offsets,
        rms=rms,
        edges_retained=len(simple.edges),
        edges_dropped=simple.dropped,
        components=connected_components(simple),
    )
    return simple, result


# --- DOT export ----------------------------------------------------------------


def multigraph_dot(graph: AlignmentMultigraph) -> str:
    """Graphviz source: solid candidate edges labeled by weight, dashed dummies."""
    lines = ["graph multigraph {", "  node [shape=circle];"]
    for node in graph.nodes:
        lines.append(f"  n{node.id} [label=\"{node.id}\"];")
    for b in graph.bundles:
        for k, c in enumerate(b.candidates):
            lines.append(
                f"  n{b.i} -- n{b.j} [label=\"{b.weights[k + 1]:.3f}\"];"
            )
        lines.append(
            f"  n{b.i} -- n{b.j} [style=dashed, label=\"{b.weights[0]:.3f}\"];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def simple_graph_dot(simple: SimpleGraph) -> str:
    lines = ["graph pruned {", "  node [shape=circle];"]
    for node in simple.nodes:
        lines.append(f"  n{node.id} [label=\"{node.id}\"];")
    for e in simple.edges:
        lines.append(f"  n{e.i} -- n{e.j} [label=\"{e.weight:.3f}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"
