"""Pseudo-labeling of the target validation subset.

Each client aligns its source classes to the server's validation clusters with
a two-level (hierarchical) OT: the inner level measures exact Wasserstein
distances between every class point cloud and every cluster point cloud; the
outer level couples classes to clusters over that cost matrix. Clients'
cluster->class mappings are then reconciled into one consensus mapping.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import ClusterAssignment
from .datasets import Dataset
from .ot_core import CostMatrix, exact_ot_assignment, sinkhorn, wasserstein_distance

MASS_TOL = 1e-9
OUTER_EPS_SCALE = 1e-2
# the outer plan is consumed only through per-column argmax, so its Sinkhorn
# solve can stop at a much coarser marginal error than the default 1e-9
OUTER_TOL = 1e-4
OUTER_MAX_ITER = 40000
_INNER_SEED = 0  # fixed seed for the size-equalizing subsample of inner costs


@dataclass
class Correspondence:
    """A cluster -> class mapping backed by the inner-cost evidence."""

    mapping: dict[int, int]
    inner_costs: np.ndarray
    client_id: str = ""
    votes: dict[int, list[tuple[str, int]]] | None = None

    def __post_init__(self):
        costs = np.asarray(self.inner_costs, dtype=np.float64)
        if costs.ndim != 2:
            raise ValueError(f"inner_costs must be 2-D, got shape {costs.shape}")
        k_s, k_t = costs.shape
        if set(self.mapping) != set(range(k_t)):
            raise ValueError(f"mapping must cover every cluster id 0..{k_t - 1}")
        for cluster, cls in self.mapping.items():
            if not 0 <= cls < k_s:
                raise ValueError(f"mapping sends cluster {cluster} to invalid class {cls}")
        costs.setflags(write=False)
        self.inner_costs = costs


@dataclass
class PseudoLabeledValidation:
    """Validation features with consensus class labels and vote provenance."""

    features: np.ndarray
    pseudo_labels: np.ndarray
    vote_record: dict[int, list[tuple[str, int]]] = field(default_factory=dict)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labs = np.asarray(self.pseudo_labels)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError("need at least one validation row")
        if labs.shape != (feats.shape[0],):
            raise ValueError(f"labels shape {labs.shape} != ({feats.shape[0]},)")
        labs = labs.astype(np.int64)
        if labs.min() < 0:
            raise ValueError("pseudo labels must be nonnegative class ids")
        feats.setflags(write=False)
        labs.setflags(write=False)
        self.features = feats
        self.pseudo_labels = labs

    def to_dataset(self, domain_id: str = "validation") -> Dataset:
        return Dataset(self.features, self.pseudo_labels, domain_id)


def class_cluster_cost(
    source: Dataset, validation_features, clusters: ClusterAssignment
) -> np.ndarray:
    """Exact Wasserstein distance between every source class and every cluster.

    Entry (c, t) compares the class-c point cloud with the cluster-t point
    cloud; unequal sizes are equalized by the solver's seeded subsample.
    """
    if source.labels is None:
        raise ValueError("source must be labeled")
    V = np.asarray(validation_features, dtype=np.float64)
    if clusters.n != V.shape[0]:
        raise ValueError(f"cluster assignment covers {clusters.n} rows, got {V.shape[0]}")
    k_s = source.num_classes()
    costs = np.empty((k_s, clusters.k))
    for c in range(k_s):
        idx = np.flatnonzero(source.labels == c)
        if idx.size == 0:
            raise ValueError(f"source class {c} has no samples")
        class_ds = source.subset(idx)
        for t in range(clusters.k):
            cluster_ds = Dataset(V[clusters.members(t)])
            costs[c, t] = wasserstein_distance(class_ds, cluster_ds, seed=_INNER_SEED)
    return costs


def hot_correspondence(
    inner_costs, class_masses, cluster_masses, client_id: str = ""
) -> Correspondence:
    """Outer OT over the inner class/cluster costs; maps each cluster to the
    class holding the largest share of its coupling column.

    Square uniform problems use the exact assignment solver (a bijection);
    otherwise Sinkhorn with epsilon = 1e-2 * max(inner_costs). Ties in a
    column take the smallest class id.
    """
    costs = np.asarray(inner_costs, dtype=np.float64)
    a = np.asarray(class_masses, dtype=np.float64)
    b = np.asarray(cluster_masses, dtype=np.float64)
    k_s, k_t = costs.shape
    if a.shape != (k_s,) or b.shape != (k_t,):
        raise ValueError("mass shapes do not match the cost matrix")
    for name, w in (("class_masses", a), ("cluster_masses", b)):
        if w.min() <= 0:
            raise ValueError(f"{name} must be strictly positive")
        if abs(w.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"{name} sums to {w.sum()!r}, expected 1")

    uniform = (
        k_s == k_t
        and np.abs(a - 1.0 / k_s).max() <= MASS_TOL
        and np.abs(b - 1.0 / k_t).max() <= MASS_TOL
    )
    if uniform:
        plan = exact_ot_assignment(CostMatrix(costs)).plan
    else:
        top = costs.max()
        if top == 0.0:
            plan = np.outer(a, b)  # constant cost: the entropic plan exactly
        else:
            plan = sinkhorn(
                CostMatrix(costs), a, b,
                epsilon=OUTER_EPS_SCALE * top,
                tol=OUTER_TOL, max_iter=OUTER_MAX_ITER,
            ).plan
    mapping = {t: int(np.argmax(plan[:, t])) for t in range(k_t)}
    return Correspondence(mapping, costs, client_id=client_id)


def majority_vote(
    correspondences: list[Correspondence],
    client_target_distances: dict[str, float],
) -> Correspondence:
    """Reconcile per-client mappings into one consensus mapping.

    One client: its mapping. Two clients: the full mapping of the client whose
    source sits closest to the target (smallest distance). Three or more:
    per-cluster modal class; any tie goes to the vote of the closest client
    among those voting for tied classes.
    """
    if not correspondences:
        raise ValueError("majority_vote needs at least one correspondence")
    clusters = sorted(correspondences[0].mapping)
    for corr in correspondences:
        if sorted(corr.mapping) != clusters:
            raise ValueError("correspondences disagree on the cluster id set")
        if corr.client_id not in client_target_distances:
            raise ValueError(f"no target distance for client {corr.client_id!r}")

    votes = {
        t: [(corr.client_id, corr.mapping[t]) for corr in correspondences] for t in clusters
    }

    def closest(cands: list[Correspondence]) -> Correspondence:
        return min(cands, key=lambda c: (client_target_distances[c.client_id], c.client_id))

    if len(correspondences) <= 2:
        winner = closest(correspondences)
        mapping = dict(winner.mapping)
        ref = winner
    else:
        mapping = {}
        for t in clusters:
            counts = Counter(cls for _, cls in votes[t])
            top = max(counts.values())
            tied = {cls for cls, cnt in counts.items() if cnt == top}
            if len(tied) == 1:
                mapping[t] = next(iter(tied))
            else:
                voters = [c for c in correspondences if c.mapping[t] in tied]
                mapping[t] = closest(voters).mapping[t]
        ref = closest(correspondences)

    return Correspondence(mapping, ref.inner_costs, client_id="consensus", votes=votes)


def apply_pseudo_labels(
    clusters: ClusterAssignment, final: Correspondence, validation_features
) -> PseudoLabeledValidation:
    """Relabel every validation row through the consensus cluster mapping."""
    V = np.asarray(validation_features, dtype=np.float64)
    if clusters.n != V.shape[0]:
        raise ValueError(f"cluster assignment covers {clusters.n} rows, got {V.shape[0]}")
    try:
        labels = np.array([final.mapping[int(c)] for c in clusters.labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unmapped cluster id {exc.args[0]}") from None
    record = final.votes
    if record is None:
        record = {t: [(final.client_id, cls)] for t, cls in final.mapping.items()}
    return PseudoLabeledValidation(V, labels, vote_record=record)


def save_correspondence(corr: Correspondence, path) -> None:
    """Long-format CSV of the inner costs with the chosen mapping flagged."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "cluster", "cost", "chosen"])
        k_s, k_t = corr.inner_costs.shape
        for c in range(k_s):
            for t in range(k_t):
                w.writerow([c, t, repr(float(corr.inner_costs[c, t])),
                            int(corr.mapping[t] == c)])
