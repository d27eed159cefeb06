"""Spectral clustering of the target validation subset.

kNN graph -> normalized Laplacian -> eigen-embedding (row-normalized) ->
k-means. Everything is dense; validation subsets are a few hundred points at
most.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ot_core import cost_matrix

DEFAULT_NEIGHBORS = 12
SYMMETRY_TOL = 1e-9
_KMEANS_MAX_ITER = 300
_SIGN_FLOOR = 1e-12


@dataclass
class ClusterAssignment:
    """Cluster ids for n points plus the k-means objective that produced them."""

    labels: np.ndarray
    k: int
    inertia: float

    def __post_init__(self):
        labs = np.asarray(self.labels)
        if labs.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {labs.shape}")
        labs = labs.astype(np.int64)
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if labs.size and (labs.min() < 0 or labs.max() >= self.k):
            raise ValueError(f"cluster ids must lie in [0, {self.k})")
        present = np.unique(labs)
        if present.size != self.k:
            missing = sorted(set(range(self.k)) - set(present.tolist()))
            raise ValueError(f"empty clusters: {missing}")
        if self.inertia < 0:
            raise ValueError("inertia must be >= 0")
        labs.setflags(write=False)
        self.labels = labs

    @property
    def n(self) -> int:
        return self.labels.size

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def knn_graph(X, neighbors: int = DEFAULT_NEIGHBORS) -> np.ndarray:
    """Binary kNN adjacency, OR-symmetrized, zero diagonal."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= neighbors < n:
        raise ValueError(f"need 1 <= neighbors < n, got neighbors={neighbors}, n={n}")
    D = cost_matrix(X, X).values.copy()
    np.fill_diagonal(D, np.inf)
    A = np.zeros((n, n))
    # argsort is stable, so distance ties resolve to the lower index
    order = np.argsort(D, axis=1, kind="stable")[:, :neighbors]
    rows = np.repeat(np.arange(n), neighbors)
    A[rows, order.ravel()] = 1.0
    A = np.maximum(A, A.T)
    return A


def laplacian(adjacency, normalized: bool = True) -> np.ndarray:
    """Graph Laplacian D - A, or the symmetric normalized I - D^-1/2 A D^-1/2.

    Vertices of degree zero use the D^-1/2 = 0 convention (their normalized
    row is the identity row).
    """
    A = np.asarray(adjacency, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if np.max(np.abs(A - A.T)) > SYMMETRY_TOL:
        raise ValueError("adjacency is not symmetric")
    deg = A.sum(axis=1)
    if not normalized:
        return np.diag(deg) - A
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(A.shape[0]) - inv_sqrt[:, None] * A * inv_sqrt[None, :]


def smallest_eigenvectors(sym, k: int) -> np.ndarray:
    """Orthonormal eigenvectors of the k smallest eigenvalues, ascending.

    Sign convention: each column's first component larger than 1e-12 in
    magnitude is made positive, so the output is unique for simple spectra.
    """
    S = np.asarray(sym, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"matrix must be square, got {S.shape}")
    if np.max(np.abs(S - S.T)) > SYMMETRY_TOL:
        raise ValueError("matrix is not symmetric")
    if not 1 <= k <= S.shape[0]:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={S.shape[0]}")
    _, vecs = np.linalg.eigh(S)
    out = vecs[:, :k].copy()
    for j in range(k):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > _SIGN_FLOOR)
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def _kmeans_pp_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers[c] = points[idx]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd_single(points: np.ndarray, k: int, rng: np.random.Generator):
    """One k-means run; returns (labels, inertia, inertia_trace)."""
    centers = _kmeans_pp_centers(points, k, rng)
    labels = np.full(points.shape[0], -1)
    trace = []
    for _ in range(_KMEANS_MAX_ITER):
        d2 = cost_matrix(points, centers).values
        new_labels = np.argmin(d2, axis=1)
        # repair empty clusters: reseed to the point farthest from its center
        for c in range(k):
            if not np.any(new_labels == c):
                far = int(np.argmax(d2[np.arange(points.shape[0]), new_labels]))
                centers[c] = points[far]
                d2 = cost_matrix(points, centers).values
                new_labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(points.shape[0]), new_labels].sum())
        trace.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return labels, trace[-1], trace


def kmeans(points, k: int, seed: int, restarts: int = 8) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding, best of `restarts` by inertia
    (ties broken by restart index)."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError("points must be 2-D")
    if not 1 <= k <= P.shape[0]:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={P.shape[0]}")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        labels, inertia, _ = _lloyd_single(P, k, rng)
        if best is None or inertia < best[0]:
            best = (inertia, labels)
    return ClusterAssignment(best[1], k, best[0])


def spectral_cluster(
    X, k: int, neighbors: int = DEFAULT_NEIGHBORS, seed: int = 0, restarts: int = 8
) -> ClusterAssignment:
    """kNN graph, normalized Laplacian, k smallest eigenvectors with unit-norm
    rows, then k-means on the embedding."""
    X = np.asarray(X, dtype=np.float64)
    A = knn_graph(X, neighbors)
    L = laplacian(A, normalized=True)
    V = smallest_eigenvectors(L, k)
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    V = np.where(norms > 0, V / np.where(norms > 0, norms, 1.0), V)
    return kmeans(V, k, seed=seed, restarts=restarts)


def silhouette_score(X, labels) -> float:
    """Mean silhouette over points; singleton clusters score 0."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    D = np.sqrt(cost_matrix(X, X).values)
    scores = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        same = labels == labels[i]
        n_same = same.sum()
        if n_same <= 1:
            continue  # singleton: score 0
        a = D[i, same].sum() / (n_same - 1)
        b = min(D[i, labels == c].mean() for c in ids if c != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def save_assignment(assignment: ClusterAssignment, path) -> None:
    """Write (index, cluster) rows as CSV."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "cluster"])
        for i, c in enumerate(assignment.labels):
            w.writerow([i, int(c)])
