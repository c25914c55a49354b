"""Pruning, weighted global alignment, and DOT export."""

from __future__ import annotations

import numpy as np
import pytest

from tileweave import (
    AlignmentMultigraph,
    CandidateTransform,
    EdgeBundle,
    SimpleEdge,
    SimpleGraph,
    StitchError,
    TileNode,
    align,
    global_align,
    multigraph_dot,
    prune,
    rms_error,
    simple_graph_dot,
    solve,
)


def _solved_graph(nodes, bundle_specs, tau=5.0):
    """Graph with hand-assigned weights, marked solved without optimizing."""
    bundles = []
    for i, j, cands, weights in bundle_specs:
        bundles.append(EdgeBundle(i, j, cands, weights=np.asarray(weights, float)))
    g = AlignmentMultigraph(nodes=nodes, bundles=bundles, tau=tau)
    g.solved = True
    return g


def _nodes(offsets):
    return [TileNode(i, f"t{i}", np.asarray(o, float)) for i, o in enumerate(offsets)]


def test_chain_alignment_exact():
    nodes = _nodes([[0, 0], [9, 1], [21, -1]])
    c1 = [CandidateTransform(np.array([10.0, 0.0]), 0.9)]
    c2 = [CandidateTransform(np.array([10.0, 0.0]), 0.9)]
    g = _solved_graph(nodes, [
        (0, 1, c1, [0.01, 0.99]),
        (1, 2, c2, [0.01, 0.99]),
    ])
    simple, result = align(g)
    np.testing.assert_allclose(
        result.offsets, [[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]], atol=1e-10
    )
    assert result.rms < 1e-10
    assert result.edges_retained == 2 and result.edges_dropped == 0
    assert result.components == [[0, 1, 2]]


def test_triangle_alignment_matches_hand_solution():
    rng = np.random.default_rng(8)
    p = np.array([3.0, -2.0])  # pinned nominal of node 0
    nodes = _nodes([p, [10, 0], [0, 10]])
    d1, d2, d3 = rng.normal(0, 5, (3, 2))
    w1, w2, w3 = 0.9, 0.6, 0.8
    g = _solved_graph(nodes, [
        (0, 1, [CandidateTransform(d1, 0.9)], [1 - w1, w1]),
        (0, 2, [CandidateTransform(d2, 0.9)], [1 - w2, w2]),
        (1, 2, [CandidateTransform(d3, 0.9)], [1 - w3, w3]),
    ])
    offsets = global_align(prune(g))
    # independent 2x2 normal equations per axis with h0 pinned at p
    a = np.array([
        [w1**2 + w3**2, -(w3**2)],
        [-(w3**2), w2**2 + w3**2],
    ])
    for axis in range(2):
        b = np.array([
            w1**2 * (d1[axis] + p[axis]) - w3**2 * d3[axis],
            w2**2 * (d2[axis] + p[axis]) + w3**2 * d3[axis],
        ])
        h12 = np.linalg.solve(a, b)
        np.testing.assert_allclose(offsets[1:, axis], h12, atol=1e-10)
    np.testing.assert_allclose(offsets[0], p, atol=0.0)


def test_alignment_is_least_squares_stationary():
    rng = np.random.default_rng(17)
    n = 8
    nodes = _nodes(rng.normal(0, 20, (n, 2)))
    edges = []
    for i in range(n - 1):
        edges.append(SimpleEdge(i, i + 1, rng.normal(0, 5, 2), float(rng.uniform(0.2, 1))))
    for _ in range(5):
        i, j = sorted(rng.choice(n, size=2, replace=False))
        edges.append(SimpleEdge(int(i), int(j), rng.normal(0, 5, 2), float(rng.uniform(0.2, 1))))
    simple = SimpleGraph(nodes=nodes, edges=edges)
    offsets = global_align(simple)
    # gradient of sum w^2 ||delta + h_i - h_j||^2 vanishes on free nodes
    grad = np.zeros((n, 2))
    for e in edges:
        r = e.delta + offsets[e.i] - offsets[e.j]
        grad[e.i] += 2 * e.weight**2 * r
        grad[e.j] -= 2 * e.weight**2 * r
    assert np.max(np.abs(grad[1:])) < 1e-8


def test_alignment_invariant_to_weight_scaling():
    rng = np.random.default_rng(23)
    nodes = _nodes(rng.normal(0, 10, (5, 2)))
    edges = [
        SimpleEdge(i, j, rng.normal(0, 5, 2), float(rng.uniform(0.2, 1.0)))
        for i, j in [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]
    ]
    base = global_align(SimpleGraph(nodes=nodes, edges=edges))
    scaled_edges = [SimpleEdge(e.i, e.j, e.delta, 7.5 * e.weight) for e in edges]
    scaled = global_align(SimpleGraph(nodes=nodes, edges=scaled_edges))
    np.testing.assert_allclose(base, scaled, atol=1e-9)


def test_prune_rules():
    nodes = _nodes([[0, 0], [10, 0], [20, 0]])
    keep = [CandidateTransform(np.array([10.0, 0.0]), 0.9),
            CandidateTransform(np.array([-3.0, 4.0]), 0.5)]
    g = _solved_graph(nodes, [
        (0, 1, keep, [0.1, 0.3, 0.6]),   # second candidate wins
        (1, 2, keep, [0.6, 0.3, 0.1]),   # dummy wins: dropped
    ])
    simple = prune(g)
    assert simple.dropped == 1
    assert len(simple.edges) == 1
    e = simple.edges[0]
    assert (e.i, e.j, e.choice) == (0, 1, 2)
    assert e.weight == pytest.approx(0.6)
    np.testing.assert_allclose(e.delta, [-3.0, 4.0])


def test_prune_requires_solved_graph():
    nodes = _nodes([[0, 0], [10, 0]])
    g = AlignmentMultigraph(
        nodes=nodes,
        bundles=[EdgeBundle(0, 1, [CandidateTransform(np.array([10.0, 0.0]), 0.9)])],
        tau=5.0,
    )
    with pytest.raises(StitchError):
        prune(g)


def test_disconnected_components_pinned_to_nominal():
    nodes = _nodes([[0, 0], [10, 0], [100, 50], [110, 50]])
    c = [CandidateTransform(np.array([12.0, 0.0]), 0.9)]
    g = _solved_graph(nodes, [
        (0, 1, c, [0.05, 0.95]),
        (2, 3, c, [0.05, 0.95]),
    ])
    simple, result = align(g)
    assert result.components == [[0, 1], [2, 3]]
    np.testing.assert_allclose(result.offsets[0], [0, 0], atol=0.0)
    np.testing.assert_allclose(result.offsets[2], [100, 50], atol=0.0)
    np.testing.assert_allclose(result.offsets[1], [12, 0], atol=1e-10)
    np.testing.assert_allclose(result.offsets[3], [112, 50], atol=1e-10)


def test_rms_error_values():
    nodes = _nodes([[0, 0], [0, 0]])
    e = SimpleEdge(0, 1, np.array([3.0, 4.0]), 1.0)
    simple = SimpleGraph(nodes=nodes, edges=[e])
    # residual (3,4) with both nodes at origin: norm 5
    assert rms_error(simple, np.zeros((2, 2))) == pytest.approx(5.0)
    two = SimpleGraph(nodes=nodes, edges=[e, SimpleEdge(0, 1, np.array([0.0, 0.0]), 1.0)])
    assert rms_error(two, np.zeros((2, 2))) == pytest.approx(np.sqrt(25.0 / 2.0))
    with pytest.raises(StitchError):
        rms_error(SimpleGraph(nodes=nodes, edges=[]), np.zeros((2, 2)))


def test_align_counts_and_empty_edge_fallback():
    nodes = _nodes([[0, 0], [10, 0]])
    c = [CandidateTransform(np.array([10.0, 0.0]), 0.9)]
    g = _solved_graph(nodes, [(0, 1, c, [0.9, 0.1])])  # dummy wins everywhere
    simple, result = align(g)
    assert result.edges_retained == 0 and result.edges_dropped == 1
    assert result.rms == 0.0
    np.testing.assert_allclose(result.offsets, [n.nominal_offset for n in nodes])
    assert result.components == [[0], [1]]


def test_alignment_result_json(tmp_path):
    nodes = _nodes([[0, 0], [9, 1]])
    c = [CandidateTransform(np.array([10.0, 0.0]), 0.9)]
    g = _solved_graph(nodes, [(0, 1, c, [0.2, 0.8])])
    _, result = align(g)
    doc = result.to_json()
    assert sorted(doc) == ["components", "edges_dropped", "edges_retained", "offsets", "rms"]
    out = tmp_path / "alignment.json"
    result.save(out)
    assert out.exists()


def test_solved_pipeline_end_to_end():
    truth = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
    nodes = [TileNode(i, f"t{i}", truth[i] + [0.5, -0.5]) for i in range(4)]
    nodes[0] = TileNode(0, "t0", truth[0])
    bundles = []
    for i, j in [(0, 1), (1, 2), (2, 3), (0, 3)]:
        bundles.append(EdgeBundle(i, j, [CandidateTransform(truth[j] - truth[i], 0.9)]))
    g = AlignmentMultigraph(nodes=nodes, bundles=bundles, tau=5.0)
    solve(g)
    simple, result = align(g)
    assert result.edges_retained == 4
    np.testing.assert_allclose(result.offsets, truth, atol=1e-8)
    assert result.rms < 1e-8


def test_dot_outputs():
    nodes = _nodes([[0, 0], [10, 0], [20, 0]])
    cands = [CandidateTransform(np.array([10.0, 0.0]), 0.9),
             CandidateTransform(np.array([-5.0, 0.0]), 0.6)]
    g = _solved_graph(nodes, [
        (0, 1, cands, [0.2, 0.5, 0.3]),
        (1, 2, cands, [0.5, 0.3, 0.2]),
    ])
    dot = multigraph_dot(g)
    assert dot.count("style=dashed") == 2          # one dummy per bundle
    assert dot.count(" -- ") == 6                  # 2 bundles x (2 candidates + dummy)
    assert "n0" in dot and "n2" in dot
    pruned = simple_graph_dot(prune(g))
    assert pruned.count(" -- ") == 1               # second bundle dropped
    assert "0.500" in pruned
