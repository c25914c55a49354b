"""Loss/gradient/Hessian correctness and full solver behavior."""

from __future__ import annotations

import numpy as np
import pytest

from tileweave import (
    AlignmentMultigraph,
    CandidateTransform,
    EdgeBundle,
    SolverConfig,
    TileNode,
    constraint_matrix,
    nullspace_basis,
    solve,
)
from tileweave import solver as sv
from tileweave.topo import connected_components

from conftest import planted_multigraph, random_multigraph


def _pinned_nodes(graph):
    """Lowest node id of each connected component (the gauge references)."""
    comps = connected_components(len(graph.nodes), [(b.i, b.j) for b in graph.bundles])
    return {c[0] for c in comps}


def _perturbed_state(graph, rng, config):
    """Initial state pushed off the nominal offsets, gauge pins untouched."""
    state = sv.initial_state(graph, config)
    pinned = _pinned_nodes(graph)
    bump = rng.normal(0.0, 2.0, state.h.shape)
    for p in pinned:
        bump[2 * p : 2 * p + 2] = 0.0
    state.h = state.h + bump
    state.loss = sv.loss(graph, state)
    return state


def _fd_gradient(graph, state, eps=1e-5):
    prob_loss = lambda h, w: sv.loss(graph, sv.SolverState(h=h, w=w, lam=0.0))
    fd_h = np.zeros_like(state.h)
    for k in range(state.h.size):
        hp, hm = state.h.copy(), state.h.copy()
        hp[k] += eps
        hm[k] -= eps
        fd_h[k] = (prob_loss(hp, state.w) - prob_loss(hm, state.w)) / (2 * eps)
    fd_w = np.zeros_like(state.w)
    for k in range(state.w.size):
        wp, wm = state.w.copy(), state.w.copy()
        wp[k] += eps
        wm[k] -= eps
        fd_w[k] = (prob_loss(state.h, wp) - prob_loss(state.h, wm)) / (2 * eps)
    return fd_h, fd_w


@pytest.mark.parametrize("seed", range(6))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    graph = random_multigraph(rng)
    config = SolverConfig(tau=graph.tau)
    state = _perturbed_state(graph, rng, config)
    g_h, g_w = sv.gradient(graph, state)
    fd_h, fd_w = _fd_gradient(graph, state)
    free = np.ones(state.h.size, dtype=bool)
    for p in _pinned_nodes(graph):
        free[2 * p : 2 * p + 2] = False
    scale_h = max(np.max(np.abs(fd_h[free])), 1e-8)
    scale_w = max(np.max(np.abs(fd_w)), 1e-8)
    assert np.max(np.abs(g_h[free] - fd_h[free])) / scale_h < 1e-6
    assert np.max(np.abs(g_w - fd_w)) / scale_w < 1e-6


def test_gradient_zero_at_gauge_pins():
    rng = np.random.default_rng(11)
    graph = random_multigraph(rng)
    config = SolverConfig(tau=graph.tau)
    state = _perturbed_state(graph, rng, config)
    g_h, _ = sv.gradient(graph, state)
    for p in _pinned_nodes(graph):
        assert g_h[2 * p] == 0.0 and g_h[2 * p + 1] == 0.0


def test_residual_definition():
    nodes = [TileNode(0, "a", np.zeros(2)), TileNode(1, "b", np.zeros(2))]
    b = EdgeBundle(0, 1, [CandidateTransform(np.array([3.0, -2.0]), 0.9)])
    g = AlignmentMultigraph(nodes=nodes, bundles=[b], tau=5.0)
    h = np.array([1.0, 2.0, 4.0, 7.0])
    np.testing.assert_allclose(sv.residual(g, h, 0, 0), [3 + 1 - 4, -2 + 2 - 7])


def _reduced_maps(graph, state):
    """Build the (free h, reduced w) coordinate maps the Hessian system uses."""
    pinned = sorted(_pinned_nodes(graph))
    free_nodes = [i for i in range(len(graph.nodes)) if i not in pinned]
    z = nullspace_basis(constraint_matrix(graph))

    def expand(x):
        h = state.h.copy()
        for slot, node in enumerate(free_nodes):
            h[2 * node : 2 * node + 2] = x[2 * slot : 2 * slot + 2]
        w = state.w + z @ x[2 * len(free_nodes):]
        return h, w

    def reduced_grad(h, w):
        st = sv.SolverState(h=h, w=w, lam=0.0)
        g_h, g_w = sv.gradient(graph, st)
        parts = [g_h[2 * n : 2 * n + 2] for n in free_nodes]
        return np.concatenate([np.concatenate(parts) if parts else np.zeros(0), z.T @ g_w])

    x0 = np.concatenate(
        [np.concatenate([state.h[2 * n : 2 * n + 2] for n in free_nodes]),
         np.zeros(z.shape[1])]
    )
    return x0, expand, reduced_grad


@pytest.mark.parametrize("seed", [0, 5, 9])
def test_hessian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    graph = random_multigraph(rng, max_nodes=6)
    config = SolverConfig(tau=graph.tau)
    state = _perturbed_state(graph, rng, config)
    m, rhs = sv.hessian_system(graph, state, 0.0)
    m = m.toarray()
    assert np.max(np.abs(m - m.T)) < 1e-12

    x0, expand, reduced_grad = _reduced_maps(graph, state)
    assert m.shape == (x0.size, x0.size)
    np.testing.assert_allclose(rhs, -reduced_grad(state.h, state.w), atol=1e-12)

    eps = 1e-3
    fd = np.zeros_like(m)
    for k in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += eps
        xm[k] -= eps
        fd[:, k] = (reduced_grad(*expand(xp)) - reduced_grad(*expand(xm))) / (2 * eps)
    scale = max(np.max(np.abs(fd)), 1.0)
    assert np.max(np.abs(m - fd)) / scale < 1e-7


def test_hessian_lambda_adds_identity():
    rng = np.random.default_rng(2)
    graph = random_multigraph(rng, max_nodes=5)
    state = sv.initial_state(graph, SolverConfig(tau=graph.tau))
    m0, _ = sv.hessian_system(graph, state, 0.0)
    m1, _ = sv.hessian_system(graph, state, 3.5)
    diff = (m1 - m0).toarray()
    np.testing.assert_allclose(diff, 3.5 * np.eye(diff.shape[0]), atol=1e-12)
    with pytest.raises(ValueError):
        sv.hessian_system(graph, state, -1.0)


def test_stationary_weights_closed_form():
    rng = np.random.default_rng(4)
    for _ in range(20):
        tau = float(rng.uniform(0.5, 10.0))
        q_r = rng.uniform(0.01, 100.0, size=int(rng.integers(1, 6)))
        w = sv.stationary_weights(q_r, tau)
        q = np.concatenate([[tau**2], q_r])
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        # KKT: 2 w_k q_k constant across the bundle
        prod = 2.0 * w * q
        assert np.ptp(prod) < 1e-9 * np.max(prod)
        # no feasible perturbation does better
        val = float(np.sum(w**2 * q))
        for _ in range(20):
            d = rng.normal(0.0, 0.05, w.size)
            d -= d.mean()
            assert np.sum((w + d) ** 2 * q) >= val - 1e-12


def test_stationary_weights_zero_residual():
    w = sv.stationary_weights(np.array([0.0, 1.0]), tau=2.0)
    np.testing.assert_allclose(w, [0.0, 1.0, 0.0])
    w = sv.stationary_weights(np.array([0.0, 0.0]), tau=2.0)
    np.testing.assert_allclose(w, [0.0, 0.5, 0.5])


def test_single_bundle_candidate_absorbed():
    nodes = [TileNode(0, "a", np.array([0.0, 0.0])), TileNode(1, "b", np.array([8.0, 1.0]))]
    b = EdgeBundle(0, 1, [CandidateTransform(np.array([10.0, 0.0]), 0.9)])
    g = AlignmentMultigraph(nodes=nodes, bundles=[b], tau=5.0)
    report = solve(g)
    assert report.loss < 1e-12
    np.testing.assert_allclose(report.offsets, [[0.0, 0.0], [10.0, 0.0]], atol=1e-9)
    assert report.selected == [{"i": 0, "j": 1, "choice": 1}]
    assert report.acyclic_bundles == [0]
    assert g.solved and g.bundles[0].weights[1] > 0.999


def _triangle_with_broken_edge(tau=5.0):
    truth = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
    nodes = [TileNode(i, f"t{i}", truth[i]) for i in range(3)]
    bundles = [
        EdgeBundle(0, 1, [CandidateTransform(truth[1] - truth[0], 0.9)]),
        EdgeBundle(0, 2, [CandidateTransform(truth[2] - truth[0] + [10 * tau, 0.0], 0.8)]),
        EdgeBundle(1, 2, [CandidateTransform(truth[2] - truth[1], 0.9)]),
    ]
    return AlignmentMultigraph(nodes=nodes, bundles=bundles, tau=tau), truth


@pytest.mark.parametrize("mode", ["levenberg_marquardt", "gradient_descent"])
def test_broken_triangle_edge_goes_to_dummy(mode):
    g, truth = _triangle_with_broken_edge()
    report = solve(g, SolverConfig(tau=5.0, mode=mode))
    choices = {(s["i"], s["j"]): s["choice"] for s in report.selected}
    assert choices[(0, 1)] == 1
    assert choices[(1, 2)] == 1
    assert choices[(0, 2)] == 0  # inconsistent by 10*tau: dummy wins
    np.testing.assert_allclose(report.offsets, truth, atol=0.05)
    # the broken bundle pays just under the full dummy floor tau^2
    assert 20.0 < report.loss < 25.0


@pytest.mark.parametrize("mode", ["levenberg_marquardt", "gradient_descent"])
def test_constraint_preserved_over_full_run(mode):
    rng = np.random.default_rng(13)
    graph, _, _ = planted_multigraph(rng, n_nodes=6)
    report = solve(graph, SolverConfig(tau=graph.tau, mode=mode, max_iterations=500))
    assert report.max_constraint_violation < 1e-9
    sizes = graph.bundle_sizes()
    w = graph.flat_weights()
    off = 0
    for m in sizes:
        assert abs(w[off : off + m].sum() - 1.0) < 1e-9
        off += m


@pytest.mark.parametrize("mode", ["levenberg_marquardt", "gradient_descent"])
def test_loss_curve_monotone(mode):
    rng = np.random.default_rng(21)
    graph, _, _ = planted_multigraph(rng, n_nodes=7)
    report = solve(graph, SolverConfig(tau=graph.tau, mode=mode))
    curve = report.loss_curve
    assert len(curve) >= 1
    for a, b in zip(curve, curve[1:]):
        assert b <= a + 1e-10 * max(1.0, abs(a))


def test_planted_solution_recovered():
    rng = np.random.default_rng(31)
    graph, truth, true_choice = planted_multigraph(
        rng, n_nodes=6, noise=0.05, p_broken=0.0
    )
    report = solve(graph)
    # gauge: compare after subtracting each component's reference error
    err = report.offsets - truth
    err -= err[0]
    assert np.max(np.linalg.norm(err, axis=1)) < 0.5
    for b, s, want in zip(graph.bundles, report.selected, true_choice):
        assert s["choice"] == want + 1, (b.i, b.j)


def test_disconnected_components_pinned_independently():
    nodes = [TileNode(i, f"t{i}", np.array([5.0 * i, 1.0 * i])) for i in range(4)]
    bundles = [
        EdgeBundle(0, 1, [CandidateTransform(np.array([7.0, 0.0]), 0.9)]),
        EdgeBundle(2, 3, [CandidateTransform(np.array([0.0, 7.0]), 0.9)]),
    ]
    g = AlignmentMultigraph(nodes=nodes, bundles=bundles, tau=5.0)
    report = solve(g)
    np.testing.assert_allclose(report.offsets[0], nodes[0].nominal_offset, atol=1e-9)
    np.testing.assert_allclose(report.offsets[2], nodes[2].nominal_offset, atol=1e-9)
    np.testing.assert_allclose(report.offsets[1] - report.offsets[0], [7.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(report.offsets[3] - report.offsets[2], [0.0, 7.0], atol=1e-8)
    # both single-bundle edges are bridges
    assert report.acyclic_bundles == [0, 1]


def test_solve_writes_back_into_graph():
    rng = np.random.default_rng(41)
    graph, _, _ = planted_multigraph(rng, n_nodes=5)
    report = solve(graph)
    assert graph.solved
    got = np.array([n.solved_offset for n in graph.nodes])
    np.testing.assert_allclose(got, report.offsets, atol=0.0)
    for b, s in zip(graph.bundles, report.selected):
        assert s == {"i": b.i, "j": b.j, "choice": b.argmax_choice()}


def test_weights_reach_stationarity():
    rng = np.random.default_rng(51)
    graph, _, _ = planted_multigraph(rng, n_nodes=5, p_broken=0.3)
    report = solve(graph)
    h = report.offsets.reshape(-1)
    for bi, b in enumerate(graph.bundles):
        q = np.array([
            float(np.sum(sv.residual(graph, h, bi, k) ** 2))
            for k in range(len(b.candidates))
        ])
        want = sv.stationary_weights(q, graph.tau)
        np.testing.assert_allclose(b.weights, want, atol=1e-5)


def test_stationary_start_terminates_quickly():
    g, _ = _triangle_with_broken_edge()
    solve(g)
    # re-solve from the already-optimal weights and offsets
    g2 = AlignmentMultigraph(
        nodes=[TileNode(n.id, n.image_ref, n.solved_offset) for n in g.nodes],
        bundles=[
            EdgeBundle(b.i, b.j, list(b.candidates), weights=b.weights.copy())
            for b in g.bundles
        ],
        tau=g.tau,
    )
    report = solve(g2)
    assert report.iterations <= 3


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tau=0.0)
    with pytest.raises(ValueError):
        SolverConfig(mode="newton")
    with pytest.raises(ValueError):
        SolverConfig(lambda_down=2.0)
    with pytest.raises(ValueError):
        SolverConfig(cg_max_iters=0)


def test_report_json_schema(tmp_path):
    g, _ = _triangle_with_broken_edge()
    report = solve(g)
    doc = report.to_json()
    assert sorted(doc) == [
        "acyclic_bundles", "iterations", "loss", "loss_curve", "offsets", "selected",
    ]
    assert all(sorted(s) == ["choice", "i", "j"] for s in doc["selected"])
    out = tmp_path / "report.json"
    report.save(out)
    assert out.exists() and out.read_text().startswith("{")
