"""Discrete optimal transport primitives.

Cost matrices, log-domain Sinkhorn-Knopp for entropic plans, an exact
assignment solver for the uniform square case, transport functionals, and
barycentric projection of source points into target space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .datasets import Dataset

MASS_TOL = 1e-9
_STREAM_EQUALIZE = 404
_CHECK_EVERY = 10  # convergence-test cadence inside sinkhorn


class ConvergenceError(RuntimeError):
    """Sinkhorn hit the iteration cap with an unacceptable marginal error."""


@dataclass
class CostMatrix:
    """Nonnegative pairwise transport costs plus the metric that built them."""

    values: np.ndarray
    metric_tag: str = "squared_euclidean"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cost matrix has non-finite entries")
        if v.size and v.min() < 0:
            raise ValueError("cost matrix has negative entries")
        if self.metric_tag not in ("squared_euclidean", "euclidean"):
            raise ValueError(f"unknown metric_tag {self.metric_tag!r}")
        v.setflags(write=False)
        self.values = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class Coupling:
    """A transport plan gamma together with the marginals it couples.

    epsilon is the entropic regularization that produced the plan (None for
    exact solutions); iterations/violation record solver effort and the final
    L1 marginal error.
    """

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    epsilon: float | None = None
    iterations: int | None = None
    violation: float | None = None

    def __post_init__(self):
        p = np.asarray(self.plan, dtype=np.float64)
        a = np.asarray(self.row_marginal, dtype=np.float64)
        b = np.asarray(self.col_marginal, dtype=np.float64)
        if p.ndim != 2 or p.shape != (a.size, b.size):
            raise ValueError(f"plan shape {p.shape} does not match marginals ({a.size}, {b.size})")
        if p.min() < 0:
            raise ValueError("plan has negative entries")
        if abs(p.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"plan mass {p.sum()!r} != 1")
        allowed = max(MASS_TOL, 0.0 if self.violation is None else self.violation) + 1e-12
        row_err = np.abs(p.sum(axis=1) - a).sum()
        col_err = np.abs(p.sum(axis=0) - b).sum()
        if row_err > allowed or col_err > allowed:
            raise ValueError(
                f"marginal violation (row {row_err:.3e}, col {col_err:.3e}) exceeds {allowed:.3e}"
            )
        for arr in (p, a, b):
            arr.setflags(write=False)
        self.plan, self.row_marginal, self.col_marginal = p, a, b

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape


def cost_matrix(X, Y, metric: str = "squared_euclidean", normalize: bool = False) -> CostMatrix:
    """Pairwise costs between row vectors of X (n, d) and Y (m, d).

    normalize=True divides by the largest entry so the scale of epsilon is
    data independent.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("X and Y must be 2-D")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} != {Y.shape[1]}")
    sq = (X * X).sum(axis=1)[:, None] + (Y * Y).sum(axis=1)[None, :] - 2.0 * (X @ Y.T)
    np.maximum(sq, 0.0, out=sq)
    vals = np.sqrt(sq) if metric == "euclidean" else sq
    if metric not in ("squared_euclidean", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    if normalize:
        top = vals.max()
        if top > 0:
            vals = vals / top
    return CostMatrix(vals, metric_tag=metric)


def sinkhorn(
    cost: CostMatrix,
    a,
    b,
    epsilon: float,
    tol: float = 1e-9,
    max_iter: int = 10000,
) -> Coupling:
    """Entropic OT plan by log-domain Sinkhorn-Knopp.

    Alternates the dual potentials f, g; the plan exp((f + g - C)/eps) has
    exact column sums after every g update, so convergence is measured as the
    L1 error of the row sums (plus columns, for the record). Raises
    ConvergenceError if the cap is reached with violation > 100 * tol.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    C = cost.values
    if C.shape != (a.size, b.size):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({a.size}, {b.size})")
    for name, w in (("a", a), ("b", b)):
        if w.min() <= 0:
            raise ValueError(f"marginal {name} must be strictly positive")
        if abs(w.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"marginal {name} sums to {w.sum()!r}, expected 1")

    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    violation = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = epsilon * (log_a - logsumexp((g[None, :] - C) / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp((f[:, None] - C) / epsilon, axis=0))
        if it == 1 or it == max_iter or it % _CHECK_EVERY == 0:
            log_plan = (f[:, None] + g[None, :] - C) / epsilon
            row_sums = np.exp(logsumexp(log_plan, axis=1))
            col_sums = np.exp(logsumexp(log_plan, axis=0))
            violation = max(np.abs(row_sums - a).sum(), np.abs(col_sums - b).sum())
            if violation <= tol:
                break
    if violation > 100 * tol:
        raise ConvergenceError(
            f"sinkhorn: violation {violation:.3e} after {it} iterations (tol {tol:.1e})"
        )
    plan = np.exp((f[:, None] + g[None, :] - C) / epsilon)
    # tiny renormalization keeps the mass-1 invariant against rounding
    plan = plan / plan.sum()
    return Coupling(plan, a, b, epsilon=epsilon, iterations=it, violation=float(violation))


def exact_ot_assignment(cost: CostMatrix) -> Coupling:
    """Optimal permutation coupling for uniform marginals on a square cost.

    Among all cost-minimizing permutations, returns the lexicographically
    smallest (fix rows in order; for each, keep the smallest column whose
    optimal completion still attains the global optimum).
    """
    C = cost.values
    n, m = C.shape
    if n != m:
        raise ValueError(f"assignment needs a square cost, got {C.shape}")
    rows, cols = linear_sum_assignment(C)
    best = float(C[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    perm = np.empty(n, dtype=np.int64)
    remaining = list(range(n))
    fixed = 0.0
    for i in range(n):
        candidates = []
        chosen = None
        for j in remaining:
            rest_cols = [c for c in remaining if c != j]
            sub = fixed + C[i, j]
            if rest_cols:
                block = C[np.ix_(range(i + 1, n), rest_cols)]
                rr, cc = linear_sum_assignment(block)
                sub += float(block[rr, cc].sum())
            candidates.append((sub, j))
            if sub <= best + tol:
                chosen = j
                break
        if chosen is None:  # numerically defensive; cannot trigger in exact terms
            chosen = min(candidates)[1]
        perm[i] = chosen
        fixed += C[i, chosen]
        remaining.remove(chosen)

    plan = np.zeros((n, n))
    plan[np.arange(n), perm] = 1.0 / n
    u = np.full(n, 1.0 / n)
    return Coupling(plan, u, u, epsilon=None, iterations=None, violation=0.0)


def transport_cost(coupling: Coupling, cost: CostMatrix) -> float:
    """Frobenius inner product of the plan with the cost matrix."""
    if coupling.plan.shape != cost.values.shape:
        raise ValueError(f"shape mismatch: {coupling.plan.shape} vs {cost.values.shape}")
    return float(np.sum(coupling.plan * cost.values))


def wasserstein_distance(A: Dataset, B: Dataset, epsilon: float | None = None, seed: int = 0) -> float:
    """Squared-Euclidean transport cost between two point clouds.

    epsilon=None solves the exact uniform assignment (the larger cloud is
    first subsampled to the smaller one's size, uniformly without replacement
    under `seed`); a positive epsilon solves the entropic problem on the full
    clouds with their stored weights, which is nonnegative but biased.
    """
    if A.dim != B.dim:
        raise ValueError(f"dimension mismatch: {A.dim} != {B.dim}")
    if epsilon is not None:
        C = cost_matrix(A.features, B.features)
        coup = sinkhorn(C, A.weights, B.weights, epsilon)
        return transport_cost(coup, C)

    for ds in (A, B):
        if np.abs(ds.weights - 1.0 / ds.n).max() > MASS_TOL:
            raise ValueError("exact mode requires uniform weights")
    n = min(A.n, B.n)
    XA, XB = A.features, B.features
    rng = np.random.default_rng([seed, _STREAM_EQUALIZE])
    if A.n > n:
        XA = XA[np.sort(rng.choice(A.n, size=n, replace=False))]
    elif B.n > n:
        XB = XB[np.sort(rng.choice(B.n, size=n, replace=False))]
    C = cost_matrix(XA, XB).values
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].sum()) / n


def barycentric_map(coupling: Coupling, Y: np.ndarray) -> np.ndarray:
    """Project each source row to the plan-weighted mean of target rows."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != coupling.plan.shape[1]:
        raise ValueError(f"target shape {Y.shape} does not match plan {coupling.plan.shape}")
    mass = coupling.plan.sum(axis=1)
    if mass.min() <= 0:
        raise ValueError("zero row mass: cannot project rows that carry no plan weight")
    return (coupling.plan @ Y) / mass[:, None]


def save_coupling(coupling: Coupling, path) -> None:
    """Write the plan as CSV with a JSON sidecar of solver metadata."""
    path = Path(path)
    np.savetxt(path, coupling.plan, delimiter=",", fmt="%.17g")
    meta = {
        "shape": list(coupling.shape),
        "epsilon": coupling.epsilon,
        "iterations": coupling.iterations,
        "marginal_violation": coupling.violation,
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
