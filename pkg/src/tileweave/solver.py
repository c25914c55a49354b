"""Constrained minimization of the multigraph consistency loss.

The loss couples per-tile placements h with per-bundle hypothesis weights w:

    f(h, w) = sum over bundles of  w_0^2 tau^2
              + sum over candidates k of  w_k^2 ||delta_k + h_i - h_j||^2

subject to each bundle's weights summing to one. Minimizers concentrate
weight on mutually consistent candidates (or on the dummy when none fit),
which is what makes the subsequent pruning cycle-consistent.

Two optimizers share the same accept-only-downhill driver: projected
gradient descent with backtracking, and a Levenberg-Marquardt step on the
reduced system (weight directions expressed in the constraint null space)
solved approximately by Jacobi-preconditioned conjugate gradient.

Placements are gauge-fixed by pinning the lowest-id node of every connected
component to its nominal offset; pinned coordinates are excluded from the
variable set and their gradient entries are reported as zero.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import AlignmentMultigraph, nullspace_basis, constraint_matrix
from .topo import connected_components, find_bridges

log = logging.getLogger(__name__)

GAMMA_UNDERFLOW = 1e-12
MAX_BACKTRACKS = 40


@dataclass
class SolverConfig:
    """Knobs for both optimizer modes. Defaults favor the LM path."""

    tau: float = 5.0
    max_iterations: int = 500
    rel_tol: float = 1e-9
    lambda0: float = 1e-2
    lambda_down: float = 0.5
    lambda_up: float = 4.0
    retry_budget: int = 10
    cg_max_iters: int = 10
    cg_rel_residual: float = 0.1
    mode: str = "levenberg_marquardt"
    gamma0: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.lambda_down < 1.0 < self.lambda_up:
            raise ValueError("need lambda_down < 1 < lambda_up")
        if self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be >= 1")
        if self.mode not in ("gradient_descent", "levenberg_marquardt"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class SolverState:
    """One iterate: flat placements h (2 per node), flat weights w."""

    h: np.ndarray
    w: np.ndarray
    lam: float
    iteration: int = 0
    loss: float = math.inf


@dataclass
class SolveReport:
    loss: float
    iterations: int
    offsets: np.ndarray
    selected: list[dict]
    loss_curve: list[float]
    acyclic_bundles: list[int]
    converged: bool = True
    mode: str = "levenberg_marquardt"
    lambda_history: list[float] = field(default_factory=list)
    max_constraint_violation: float = 0.0

    def to_json(self) -> dict:
        return {
            "loss": float(self.loss),
            "iterations": int(self.iterations),
            "offsets": [[float(x), float(y)] for x, y in self.offsets],
            "selected": list(self.selected),
            "loss_curve": [float(v) for v in self.loss_curve],
            "acyclic_bundles": [int(b) for b in self.acyclic_bundles],
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


class _Problem:
    """Graph flattened into index arrays for vectorized loss/derivatives."""

    def __init__(self, graph: AlignmentMultigraph, tau: float):
        self.graph = graph
        self.tau = float(tau)
        self.n_nodes = graph.n_nodes
        self.nominal = np.array([n.nominal_offset for n in graph.nodes])

        sizes = graph.bundle_sizes()
        self.n_bundles = len(graph.bundles)
        self.n_weights = int(sizes.sum()) if self.n_bundles else 0
        offsets = np.zeros(self.n_bundles + 1, dtype=int)
        np.cumsum(sizes, out=offsets[1:])
        self.w_offsets = offsets
        self.dummy_idx = offsets[:-1]

        self.bundle_i = np.array([b.i for b in graph.bundles], dtype=int)
        self.bundle_j = np.array([b.j for b in graph.bundles], dtype=int)

        # candidate-major arrays (dummies excluded)
        cand_bundle = []
        cand_widx = []
        deltas = []
        for bi, b in enumerate(graph.bundles):
            for k, c in enumerate(b.candidates):
                cand_bundle.append(bi)
                cand_widx.append(offsets[bi] + 1 + k)
                deltas.append(c.delta)
        self.cand_bundle = np.array(cand_bundle, dtype=int)
        self.cand_widx = np.array(cand_widx, dtype=int)
        self.cand_delta = (
            np.array(deltas) if deltas else np.zeros((0, 2))
        )
        self.cand_i = self.bundle_i[self.cand_bundle] if len(deltas) else np.zeros(0, dtype=int)
        self.cand_j = self.bundle_j[self.cand_bundle] if len(deltas) else np.zeros(0, dtype=int)

        edges = list(zip(self.bundle_i.tolist(), self.bundle_j.tolist()))
        self.components = connected_components(self.n_nodes, edges)
        self.pinned = np.zeros(self.n_nodes, dtype=bool)
        for comp in self.components:
            self.pinned[comp[0]] = True

        # map node id -> slot in the reduced (free) placement vector
        self.free_nodes = np.flatnonzero(~self.pinned)
        self.free_slot = -np.ones(self.n_nodes, dtype=int)
        self.free_slot[self.free_nodes] = np.arange(self.free_nodes.size)
        self.n_free = 2 * self.free_nodes.size

        self.Z = nullspace_basis(constraint_matrix(graph))
        self.n_reduced_w = self.Z.shape[1]

    # --- loss and derivatives ------------------------------------------------

    def residuals(self, h2: np.ndarray) -> np.ndarray:
        """(C, 2) array of delta_k + h_i - h_j per candidate."""
        return self.cand_delta + h2[self.cand_i] - h2[self.cand_j]

    def loss(self, h: np.ndarray, w: np.ndarray) -> float:
        h2 = h.reshape(-1, 2)
        r = self.residuals(h2)
        w_d = w[self.dummy_idx]
        w_c = w[self.cand_widx]
        return float(
            np.sum(w_d**2) * self.tau**2 + np.sum(w_c**2 * np.sum(r * r, axis=1))
        )

    def gradient(self, h: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h2 = h.reshape(-1, 2)
        r = self.residuals(h2)
        w_c = w[self.cand_widx]

        g_h2 = np.zeros_like(h2)
        contrib = 2.0 * (w_c**2)[:, None] * r
        np.add.at(g_h2, self.cand_i, contrib)
        np.add.at(g_h2, self.cand_j, -contrib)
        g_h2[self.pinned] = 0.0

        g_w = np.zeros(self.n_weights)
        g_w[self.dummy_idx] = 2.0 * self.tau**2 * w[self.dummy_idx]
        g_w[self.cand_widx] = 2.0 * w_c * np.sum(r * r, axis=1)
        return g_h2.reshape(-1), g_w

    def project_w(self, g_w: np.ndarray) -> np.ndarray:
        """Apply Z Z^T: subtract each bundle's mean."""
        out = g_w.copy()
        for b in range(self.n_bundles):
            lo, hi = self.w_offsets[b], self.w_offsets[b + 1]
            out[lo:hi] -= out[lo:hi].mean()
        return out

    def constraint_violation(self, w: np.ndarray) -> float:
        if self.n_bundles == 0:
            return 0.0
        sums = np.add.reduceat(w, self.w_offsets[:-1])
        return float(np.max(np.abs(sums - 1.0)))

    # --- reduced Hessian system ----------------------------------------------

    def hessian_system(
        self, h: np.ndarray, w: np.ndarray, lam: float
    ) -> tuple[sp.csr_matrix, np.ndarray]:
        """Sparse reduced curvature matrix plus negated-gradient RHS.

        Variables are [free placement coords, null-space weight coords a],
        so accepted updates w + Z a keep every bundle sum at one exactly.
        """
        h2 = h.reshape(-1, 2)
        r = self.residuals(h2)
        w_c = w[self.cand_widx]
        nf = self.n_free

        # placement-placement block: per bundle, 2*sum_k w_k^2 on the
        # (i,i),(j,j) diagonals and its negative on (i,j),(j,i)
        s_b = np.zeros(self.n_bundles)
        np.add.at(s_b, self.cand_bundle, w_c**2)
        rows, cols, vals = [], [], []
        for b in range(self.n_bundles):
            coef = 2.0 * s_b[b]
            i, j = self.bundle_i[b], self.bundle_j[b]
            si, sj = self.free_slot[i], self.free_slot[j]
            for axis in range(2):
                if si >= 0:
                    rows.append(2 * si + axis)
                    cols.append(2 * si + axis)
                    vals.append(coef)
                if sj >= 0:
                    rows.append(2 * sj + axis)
                    cols.append(2 * sj + axis)
                    vals.append(coef)
                if si >= 0 and sj >= 0:
                    rows.extend([2 * si + axis, 2 * sj + axis])
                    cols.extend([2 * sj + axis, 2 * si + axis])
                    vals.extend([-coef, -coef])
        A = sp.csr_matrix((vals, (rows, cols)), shape=(nf, nf))

        # placement-weight block: column per weight, +-4 w_k r_k at the
        # incident free nodes; dummy columns are zero
        rows, cols, vals = [], [], []
        for c in range(self.cand_widx.size):
            col = self.cand_widx[c]
            si = self.free_slot[self.cand_i[c]]
            sj = self.free_slot[self.cand_j[c]]
            g = 4.0 * w_c[c] * r[c]
            for axis in range(2):
                if si >= 0:
                    rows.append(2 * si + axis)
                    cols.append(col)
                    vals.append(g[axis])
                if sj >= 0:
                    rows.append(2 * sj + axis)
                    cols.append(col)
                    vals.append(-g[axis])
        B_full = sp.csr_matrix((vals, (rows, cols)), shape=(nf, self.n_weights))
        B = B_full @ self.Z

        # weight-weight block is diagonal: 2 tau^2 at dummies, 2 ||r_k||^2 else
        q = np.zeros(self.n_weights)
        q[self.dummy_idx] = 2.0 * self.tau**2
        q[self.cand_widx] = 2.0 * np.sum(r * r, axis=1)
        D = (self.Z.T @ sp.diags(q) @ self.Z).tocsr()

        M = sp.bmat([[A, B], [B.T, D]], format="csr")
        M = (M + lam * sp.eye(M.shape[0], format="csr")).tocsr()

        g_h, g_w = self.gradient(h, w)
        g_h_free = g_h.reshape(-1, 2)[self.free_nodes].reshape(-1)
        rhs = -np.concatenate([g_h_free, self.Z.T @ g_w])
        return M, rhs

    def apply_reduced_step(
        self, h: np.ndarray, w: np.ndarray, step: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        dh_free = step[: self.n_free].reshape(-1, 2)
        da = step[self.n_free :]
        h2 = h.reshape(-1, 2).copy()
        h2[self.free_nodes] += dh_free
        return h2.reshape(-1), w + self.Z @ da


# --- public operations -------------------------------------------------------


def residual(graph: AlignmentMultigraph, h: np.ndarray, b: int, k: int) -> np.ndarray:
    """delta_{b,k} + h_i - h_j for bundle b's candidate k (0-based)."""
    h2 = np.asarray(h, dtype=float).reshape(-1, 2)
    bundle = graph.bundles[b]
    return bundle.candidates[k].delta + h2[bundle.i] - h2[bundle.j]


def loss(graph: AlignmentMultigraph, state: SolverState) -> float:
    return _Problem(graph, graph.tau).loss(state.h, state.w)


def gradient(
    graph: AlignmentMultigraph, state: SolverState
) -> tuple[np.ndarray, np.ndarray]:
    return _Problem(graph, graph.tau).gradient(state.h, state.w)


def hessian_system(
    graph: AlignmentMultigraph, state: SolverState, lam: float
) -> tuple[sp.csr_matrix, np.ndarray]:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return _Problem(graph, graph.tau).hessian_system(state.h, state.w, lam)


def initial_state(graph: AlignmentMultigraph, config: SolverConfig) -> SolverState:
    prob = _Problem(graph, config.tau)
    h = prob.nominal.reshape(-1).copy()
    w = graph.flat_weights()
    state = SolverState(h=h, w=w, lam=config.lambda0)
    state.loss = prob.loss(h, w)
    return state


def _gd_step(
    prob: _Problem, state: SolverState, gamma_h: float, gamma_w: float
) -> tuple[SolverState, float, bool]:
    """Backtracking descent step. Returns (state, accepted gamma scale, ok)."""
    g_h, g_w = prob.gradient(state.h, state.w)
    pg_w = prob.project_w(g_w)
    scale = 1.0
    for _ in range(MAX_BACKTRACKS + 1):
        if scale * min(gamma_h, gamma_w) < GAMMA_UNDERFLOW:
            break
        h_new = state.h - scale * gamma_h * g_h
        w_new = state.w - scale * gamma_w * pg_w
        f_new = prob.loss(h_new, w_new)
        if f_new < state.loss:
            new = SolverState(
                h=h_new, w=w_new, lam=state.lam,
                iteration=state.iteration + 1, loss=f_new,
            )
            return new, scale, True
        scale *= 0.5
    return state, scale, False


def projected_gd_step(
    graph: AlignmentMultigraph,
    state: SolverState,
    gamma_h: float,
    gamma_w: float,
) -> SolverState:
    """One backtracking projected-descent step; unchanged state on underflow."""
    prob = _Problem(graph, graph.tau)
    new, _, ok = _gd_step(prob, state, gamma_h, gamma_w)
    if not ok:
        log.debug("gd step underflow at iteration %d", state.iteration)
    return new


def _pcg(
    M: sp.csr_matrix, rhs: np.ndarray, max_iters: int, rel_residual: float
) -> tuple[np.ndarray, bool]:
    """Jacobi-preconditioned CG. Returns (x, hit_nonpositive_curvature)."""
    diag = M.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.maximum(diag, 1e-300), 1.0)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return x, False
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    # r @ z underflows to exactly 0 for denormal gradients near a fully
    # converged state; treat that as done rather than dividing by it
    if rz == 0.0:
        return x, False
    for _ in range(max_iters):
        Mp = M @ p
        curvature = float(p @ Mp)
        if curvature <= 0.0:
            return x, True
        alpha = rz / curvature
        x = x + alpha * p
        r = r - alpha * Mp
        if np.linalg.norm(r) <= rel_residual * rhs_norm:
            break
        z = inv_diag * r
        rz_new = float(r @ z)
        if rz_new == 0.0:
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, False


def _lm_step(
    prob: _Problem, state: SolverState, config: SolverConfig
) -> tuple[SolverState, bool]:
    """LM with lambda retry loop; falls back to a descent step when stuck."""
    lam = state.lam
    for _ in range(config.retry_budget):
        M, rhs = prob.hessian_system(state.h, state.w, lam)
        if not np.any(rhs):
            break
        step, bad_curvature = _pcg(M, rhs, config.cg_max_iters, config.cg_rel_residual)
        if bad_curvature or not np.any(step):
            lam *= config.lambda_up
            continue
        h_new, w_new = prob.apply_reduced_step(state.h, state.w, step)
        f_new = prob.loss(h_new, w_new)
        if f_new < state.loss:
            new = SolverState(
                h=h_new, w=w_new, lam=lam * config.lambda_down,
                iteration=state.iteration + 1, loss=f_new,
            )
            return new, True
        lam *= config.lambda_up
    state = SolverState(
        h=state.h, w=state.w, lam=lam, iteration=state.iteration, loss=state.loss
    )
    new, _, ok = _gd_step(prob, state, config.gamma0, config.gamma0)
    return new, ok


def lm_step(
    graph: AlignmentMultigraph, state: SolverState, config: SolverConfig
) -> SolverState:
    prob = _Problem(graph, config.tau)
    new, _ = _lm_step(prob, state, config)
    return new


def solve(graph: AlignmentMultigraph, config: SolverConfig | None = None) -> SolveReport:
    """Run the configured optimizer to convergence and write results back.

    The graph's nodes receive solved offsets, bundle weights are updated in
    place, and the graph is flagged solved for downstream pruning.
    Deterministic: no randomness anywhere in the iteration.
    """
    if config is None:
        config = SolverConfig(tau=graph.tau)
    prob = _Problem(graph, config.tau)
    state = initial_state(graph, config)

    loss_curve = [state.loss]
    lambda_history = [state.lam]
    max_violation = prob.constraint_violation(state.w)
    gamma = config.gamma0
    converged = False

    for _ in range(config.max_iterations):
        prev_loss = state.loss
        if config.mode == "levenberg_marquardt":
            state, ok = _lm_step(prob, state, config)
        else:
            state, used, ok = _gd_step(prob, state, gamma, gamma)
            if ok:
                gamma = min(used * gamma * 2.0, 1e6)
        if not ok:
            converged = True
            break
        loss_curve.append(state.loss)
        lambda_history.append(state.lam)
        max_violation = max(max_violation, prob.constraint_violation(state.w))
        drop = prev_loss - state.loss
        if drop <= config.rel_tol * max(abs(prev_loss), 1e-30):
            converged = True
            break

    h2 = state.h.reshape(-1, 2)
    graph.set_flat_weights(state.w)
    for node in graph.nodes:
        node.solved_offset = h2[node.id].copy()
    graph.solved = True

    selected = [
        {"i": b.i, "j": b.j, "choice": b.argmax_choice()} for b in graph.bundles
    ]
    edges = list(zip(prob.bundle_i.tolist(), prob.bundle_j.tolist()))
    acyclic = find_bridges(prob.n_nodes, edges)

    return SolveReport(
        loss=state.loss,
        iterations=state.iteration,
        offsets=h2.copy(),
        selected=selected,
        loss_curve=loss_curve,
        acyclic_bundles=acyclic,
        converged=converged,
        mode=config.mode,
        lambda_history=lambda_history,
        max_constraint_violation=max_violation,
    )


def stationary_weights(residual_norms_sq: np.ndarray, tau: float) -> np.ndarray:
    """Closed-form per-bundle optimal weights for fixed placements.

    Minimizing sum w_k^2 q_k with sum w = 1 (q_0 = tau^2, q_k = ||r_k||^2)
    gives w_k proportional to 1/q_k. Zero q gets all the weight, split
    evenly among zero entries. Used as an independent oracle in tests and
    for seeding; the solver itself never calls it.
    """
    q = np.concatenate([[tau**2], np.asarray(residual_norms_sq, dtype=float)])
    zero = q <= 0.0
    if np.any(zero):
        w = np.zeros_like(q)
        w[zero] = 1.0 / zero.sum()
        return w
    inv = 1.0 / q
    return inv / inv.sum()
