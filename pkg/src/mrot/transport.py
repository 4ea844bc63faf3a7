"""Regularized mini-batch optimal transport with uniform marginals.

The coupling minimizes

    <T, D> + lambda1 * sum_ij T_ij log T_ij + lambda2 * Omega(T)

over the transport polytope with uniform 1/b marginals, where Omega is the
posterior variance of the source labels transported onto each target sample.
Omega is concave on the polytope, so the problem is a difference of convex
programs; it is solved by a generalized conditional gradient that keeps the
entropy in the subproblem (a Sinkhorn solve) and linearizes Omega.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from mrot.ground_cost import CostMatrix

logger = logging.getLogger(__name__)

# Above this cost range / lambda1 ratio the kernel exp(-D / lambda1) risks
# underflow in the scaling iterations, so the log-domain path is used.
_KERNEL_RANGE_LIMIT = 200.0
_CHECK_EVERY = 10
_ABSORB_LIMIT = 30.0
MAX_ORACLE_SIZE = 6


@dataclass
class Coupling:
    """Transport plan with the feasibility residual it was returned with."""

    plan: np.ndarray
    marginal_tolerance: float = 0.0
    n_iter: int = 0

    def __post_init__(self):
        self.plan = np.asarray(self.plan, dtype=float)

    @property
    def size(self):
        return self.plan.shape[0]


@dataclass(frozen=True)
class OtParams:
    lambda1: float = 0.05
    lambda2: float = 0.0
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 10_000
    gcg_max_iter: int = 50
    gcg_tol: float = 1e-7

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ValueError(f"lambda1 must be > 0, got {self.lambda1}")
        if self.lambda2 < 0:
            raise ValueError(f"lambda2 must be >= 0, got {self.lambda2}")
        if self.sinkhorn_tol <= 0 or self.gcg_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.sinkhorn_max_iter < 1 or self.gcg_max_iter < 1:
            raise ValueError("iteration caps must be positive")


def _cost_entries(cost):
    d = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] == 0:
        raise ValueError(f"cost must be a non-empty square matrix, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("cost matrix has non-finite entries")
    return d


def _plan_entries(plan):
    return plan.plan if isinstance(plan, Coupling) else np.asarray(plan, dtype=float)


def marginal_residuals(plan):
    """Max absolute deviation of row sums and of column sums from 1/b."""
    t = _plan_entries(plan)
    u = 1.0 / t.shape[0]
    return float(np.abs(t.sum(1) - u).max()), float(np.abs(t.sum(0) - u).max())


def _logsumexp(x, axis):
    top = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - top).sum(axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis)


def _sinkhorn_kernel(d, lambda1, tol, max_iter, v0=None):
    n = d.shape[0]
    a = np.full(n, 1.0 / n)
    k = np.exp(-(d - d.min()) / lambda1)
    v = np.ones(n) if v0 is None else v0
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        u = a / (k @ v)
        v = a / (k.T @ u)
        if it % _CHECK_EVERY == 0 or it == max_iter:
            res = np.abs(u * (k @ v) - a).max()
            if res <= tol:
                break
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        return None, it, None
    return u[:, None] * k * v[None, :], it, v


def _log_iterations(d, lam, f, g, tol, max_iter):
    # Scaling iterations on a kernel stabilized by the dual potentials (f, g);
    # the scalings are absorbed back into (f, g) before they over/underflow.
    n = d.shape[0]
    a = 1.0 / n

    def kernel(f, g):
        return np.exp((f[:, None] + g[None, :] - d) / lam)

    k = kernel(f, g)
    u = np.ones(n)
    v = np.ones(n)
    it = 0
    for it in range(1, max_iter + 1):
        kv = k @ v
        if not np.all(kv > 0):
            # a row of the stabilized kernel underflowed: exact log-domain update
            f, g = f + lam * np.log(u), g + lam * np.log(v)
            f = lam * (np.log(a) - _logsumexp((g[None, :] - d) / lam, axis=1))
            k, u, v = kernel(f, g), np.ones(n), np.ones(n)
            kv = k @ v
        u = a / kv
        v = a / (k.T @ u)
        if np.abs(np.log(u)).max() > _ABSORB_LIMIT or np.abs(np.log(v)).max() > _ABSORB_LIMIT:
            f, g = f + lam * np.log(u), g + lam * np.log(v)
            k, u, v = kernel(f, g), np.ones(n), np.ones(n)
        if it % _CHECK_EVERY == 0 or it == max_iter:
            if np.abs(u * (k @ v) - a).max() <= tol:
                break
    return f + lam * np.log(u), g + lam * np.log(v), it


def _sinkhorn_log(d, lambda1, tol, max_iter):
    # epsilon scaling: warm-start the dual potentials from coarser temperatures
    n = d.shape[0]
    f = np.zeros(n)
    g = np.zeros(n)
    lam = max(np.ptp(d), lambda1)
    total = 0
    while lam > lambda1:
        f, g, it = _log_iterations(d, lam, f, g, 1e-4 / n, 200)
        total += it
        lam = max(lam * 0.5, lambda1)
    f, g, it = _log_iterations(d, lambda1, f, g, tol, max_iter)
    return np.exp((f[:, None] + g[None, :] - d) / lambda1), total + it


def round_to_polytope(plan):
    """Project a near-feasible plan onto the uniform polytope.

    Rows and columns that carry too much mass are scaled down, then the
    missing mass is restored with a rank-one correction, which keeps every
    entry non-negative.
    """
    t = np.array(plan, dtype=float)
    n = t.shape[0]
    u = 1.0 / n
    t *= np.minimum(u / np.maximum(t.sum(1), 1e-300), 1.0)[:, None]
    t *= np.minimum(u / np.maximum(t.sum(0), 1e-300), 1.0)[None, :]
    err_r = u - t.sum(1)
    err_c = u - t.sum(0)
    mass = err_r.sum()
    if mass > 0:
        t += np.outer(err_r, err_c) / mass
    return t


def sinkhorn(cost, lambda1: float, tol: float = 1e-9, max_iter: int = 10_000) -> Coupling:
    """Entropic OT plan between two uniform batches by alternating scaling.

    Solves ``min <T, D> + lambda1 * sum T log T`` over the uniform transport
    polytope. Well-conditioned problems use the multiplicative kernel form;
    when ``range(D) / lambda1`` is large enough for ``exp(-D / lambda1)`` to
    underflow, the iterations run on log-potentials instead.

    Returns
    -------
    Coupling
        ``marginal_tolerance`` holds the achieved max marginal residual. If
        ``max_iter`` is hit before ``tol``, the iterate is rounded onto the
        polytope (:func:`round_to_polytope`) so the returned plan is feasible.
    """
    return _sinkhorn(cost, lambda1, tol, max_iter)[0]


def _sinkhorn(cost, lambda1, tol, max_iter, warm=None):
    d = _cost_entries(cost)
    if not lambda1 > 0:
        raise ValueError(f"lambda1 must be > 0, got {lambda1}")
    n = d.shape[0]
    if n == 1:
        return Coupling(np.ones((1, 1)), 0.0, 0), None

    plan = v = None
    if np.ptp(d) / lambda1 <= _KERNEL_RANGE_LIMIT:
        plan, it, v = _sinkhorn_kernel(d, lambda1, tol, max_iter, warm)
    if plan is None:
        plan, it = _sinkhorn_log(d, lambda1, tol, max_iter)
    res = max(marginal_residuals(plan))
    if res > tol:
        logger.info("sinkhorn hit max_iter=%d at residual %.3g; rounding onto the polytope",
                    max_iter, res)
        plan = round_to_polytope(plan)
        res = max(marginal_residuals(plan))
    return Coupling(plan, res, it), v


def entropy_term(plan) -> float:
    """``sum_ij T_ij log T_ij`` with ``0 log 0 = 0``."""
    t = _plan_entries(plan)
    pos = t > 0
    return float(np.sum(t[pos] * np.log(t[pos])))


def _check_labels(t, labels):
    y = np.asarray(labels, dtype=float).ravel()
    if y.shape[0] != t.shape[0]:
        raise ValueError(f"expected {t.shape[0]} source labels, got {y.shape[0]}")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(t)):
        raise ValueError("plan and labels must be finite")
    return y


def variance_regularizer(plan, source_labels) -> float:
    """Sum over target columns of the variance of the transported source labels.

    Column j defines posterior weights ``b * T[:, j]`` over the source labels.
    """
    t = _plan_entries(plan)
    y = _check_labels(t, source_labels)
    w = t.shape[0] * t
    mean = y @ w
    return float(np.sum(w * (y[:, None] - mean[None, :]) ** 2))


def variance_regularizer_gradient(plan, source_labels) -> np.ndarray:
    """Exact partial derivatives of :func:`variance_regularizer` w.r.t. ``T_ij``.

    The second term vanishes on the polytope, where every column of ``b * T``
    sums to one, but it is kept so the gradient is also correct off it.
    """
    t = _plan_entries(plan)
    y = _check_labels(t, source_labels)
    b = t.shape[0]
    w = b * t
    mean = y @ w
    dev = y[:, None] - mean[None, :]
    moment = np.sum(w * dev, axis=0)
    return b * dev**2 - 2.0 * b * y[:, None] * moment[None, :]


def mrot_objective(plan, cost, source_labels, lambda1, lambda2) -> float:
    """Transport cost plus entropy and posterior-variance penalties."""
    t = _plan_entries(plan)
    d = _cost_entries(cost)
    val = float(np.sum(t * d)) + lambda1 * entropy_term(t)
    if lambda2:
        val += lambda2 * variance_regularizer(t, source_labels)
    return val


def _assignment_vertex(d):
    n = d.shape[0]
    rows, cols = linear_sum_assignment(d)
    vertex = np.zeros_like(d)
    vertex[rows, cols] = 1.0 / n
    return vertex


@dataclass
class _TraceRow:
    objective: float
    row_residual: float
    col_residual: float


@dataclass
class SolveTrace:
    rows: list = field(default_factory=list)

    def add(self, objective, plan):
        self.rows.append(_TraceRow(objective, *marginal_residuals(plan)))

    @property
    def objectives(self):
        return np.array([r.objective for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "objective", "row_residual", "col_residual"])
            for i, r in enumerate(self.rows):
                writer.writerow([i, repr(r.objective), repr(r.row_residual), repr(r.col_residual)])


def solve_mrot_plan(cost, source_labels, params: OtParams, trace_path=None, return_trace=False):
    """Minimize the entropic + posterior-variance OT objective.

    Generalized conditional gradient: at iterate ``T_k`` the concave variance
    term is linearized, the subproblem ``sinkhorn(D + lambda2 * grad, lambda1)``
    gives a target point ``S_k``, and a backtracking search on
    ``T_k + gamma (S_k - T_k)`` (gamma = 1, 1/2, ... at most 30 halvings)
    keeps the first step that lowers the true objective.

    The loop starts from an optimal assignment vertex of ``D``. Vertices carry
    zero posterior variance, and starting there avoids the uniform coupling,
    which is a stationary point of the linearization whenever the cost is
    constant.

    Returns
    -------
    coupling : Coupling
    objective_trace : ndarray
        Objective after each accepted iterate (the first entry is the start).
    """
    d = _cost_entries(cost)
    y = np.asarray(source_labels, dtype=float).ravel()
    if y.shape[0] != d.shape[0]:
        raise ValueError(f"expected {d.shape[0]} source labels, got {y.shape[0]}")
    lam1, lam2 = params.lambda1, params.lambda2
    trace = SolveTrace()

    def objective(t):
        return mrot_objective(t, d, y, lam1, lam2)

    if d.shape[0] == 1 or lam2 == 0:
        coupling = sinkhorn(d, lam1, params.sinkhorn_tol, params.sinkhorn_max_iter)
        trace.add(objective(coupling.plan), coupling.plan)
        return _finish(coupling, trace, trace_path, return_trace)

    t = _assignment_vertex(d)
    f = objective(t)
    trace.add(f, t)
    n_iter = 0
    tol_res = 0.0
    warm = None
    for n_iter in range(1, params.gcg_max_iter + 1):
        lin_cost = d + lam2 * variance_regularizer_gradient(t, y)
        sub, warm = _sinkhorn(lin_cost, lam1, params.sinkhorn_tol, params.sinkhorn_max_iter, warm)
        direction = sub.plan - t
        gamma = 1.0
        accepted = None
        for _ in range(31):
            cand = t + gamma * direction
            f_cand = objective(cand)
            if f_cand < f:
                accepted = cand
                break
            gamma *= 0.5
        if accepted is None:
            break
        decrease = f - f_cand
        t, f = accepted, f_cand
        tol_res = max(tol_res, sub.marginal_tolerance)
        trace.add(f, t)
        if decrease < params.gcg_tol * max(1.0, abs(f)):
            break

    objs = trace.objectives
    if np.any(np.diff(objs) > 1e-8 * max(1.0, np.abs(objs).max())):
        raise RuntimeError("GCG objective increased; the variance gradient is inconsistent")
    coupling = Coupling(t, max(marginal_residuals(t)), n_iter)
    return _finish(coupling, trace, trace_path, return_trace)


def _finish(coupling, trace, trace_path, return_trace):
    if trace_path is not None:
        trace.to_csv(trace_path)
    if return_trace:
        return coupling, trace.objectives, trace
    return coupling, trace.objectives


def exact_ot_oracle(cost):
    """Exact unregularized OT by enumerating scaled permutation matrices.

    With equal-size uniform marginals an optimal plan sits on a vertex of the
    Birkhoff polytope, so scanning all ``b!`` permutations is exact. Limited to
    ``b <= 6``.

    Returns
    -------
    coupling : Coupling
    value : float
    """
    d = _cost_entries(cost)
    n = d.shape[0]
    if n > MAX_ORACLE_SIZE:
        raise ValueError(f"exact oracle is limited to b <= {MAX_ORACLE_SIZE}, got b={n}")
    best_val, best_perm = np.inf, None
    idx = np.arange(n)
    for perm in itertools.permutations(range(n)):
        val = d[idx, perm].sum() / n
        if val < best_val:
            best_val, best_perm = val, perm
    plan = np.zeros_like(d)
    plan[idx, best_perm] = 1.0 / n
    return Coupling(plan, 0.0, 0), float(best_val)


def ot_loss(plan, cost) -> float:
    """Frobenius product ``sum_ij T_ij D_ij``."""
    t = _plan_entries(plan)
    d = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    if t.shape != d.shape:
        raise ValueError(f"shape mismatch: plan {t.shape} vs cost {d.shape}")
    return float(np.sum(t * d))
