"""Nonparametric comparison of methods over shared samples.

Given a methods-by-samples accuracy table: per-sample ranks, the Friedman
omnibus test on mean ranks, the Nemenyi critical difference for post-hoc
pairwise comparison, robust MED/MAD summaries, and the grouping of methods
whose mean ranks stay within one critical difference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special
from scipy.stats import rankdata

# Two-tailed Nemenyi critical values q_alpha(k) at alpha = 0.05 for
# k = 2..20 methods: the 95th percentile of the studentized range with
# infinite degrees of freedom, divided by sqrt(2). Standard published table;
# cross-checked against scipy's studentized-range distribution in the tests.
_Q_05 = (
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219,
    3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
)


@dataclass
class AccuracyTable:
    """Accuracies (%) of `methods` over `samples`; no missing cells."""

    methods: list[str]
    samples: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.methods = [str(m) for m in self.methods]
        self.samples = [str(s) for s in self.samples]
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape != (len(self.methods), len(self.samples)):
            raise ValueError(
                f"values shape {v.shape} does not match "
                f"{len(self.methods)} methods x {len(self.samples)} samples"
            )
        if len(self.methods) < 2 or len(self.samples) < 2:
            raise ValueError("need at least 2 methods and 2 samples")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("duplicate method names")
        if len(set(self.samples)) != len(self.samples):
            raise ValueError("duplicate sample names")
        if not np.all(np.isfinite(v)):
            raise ValueError("accuracy table has missing or non-finite cells")
        v.setflags(write=False)
        self.values = v

    @property
    def k(self) -> int:
        return len(self.methods)

    @property
    def n(self) -> int:
        return len(self.samples)


def load_accuracy_table(path) -> AccuracyTable:
    """CSV with methods as rows: header `method,<sample>,...`, one row per
    method."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise ValueError(f"{path}: expected a header row 'method,<samples...>'")
    samples = [h.strip() for h in rows[0][1:]]
    methods, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(samples) + 1:
            raise ValueError(f"{path}: row {i} has {len(row)} fields, expected {len(samples) + 1}")
        methods.append(row[0].strip())
        try:
            values.append([float(x) for x in row[1:]])
        except ValueError:
            raise ValueError(f"{path}: row {i} has a non-numeric accuracy") from None
    return AccuracyTable(methods, samples, np.array(values))


def save_accuracy_table(table: AccuracyTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + table.samples)
        for m, row in zip(table.methods, table.values):
            w.writerow([m] + [repr(float(x)) for x in row])


def rank_matrix(table: AccuracyTable) -> np.ndarray:
    """Per-sample ranks, 1 = highest accuracy; ties get averaged ranks."""
    return np.column_stack(
        [rankdata(-table.values[:, j], method="average") for j in range(table.n)]
    )


def friedman(ranks) -> tuple[float, float]:
    """Friedman chi-square statistic over a k-methods x N-samples rank matrix
    and its p-value (chi-square survival function, k-1 degrees of freedom)."""
    R = np.asarray(ranks, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 2 or R.shape[1] < 2:
        raise ValueError(f"need a k x N rank matrix with k, N >= 2, got shape {R.shape}")
    k, n = R.shape
    mean_ranks = R.mean(axis=1)
    stat = 12.0 * n / (k * (k + 1)) * (np.sum(mean_ranks**2) - k * (k + 1) ** 2 / 4.0)
    stat = float(max(stat, 0.0))  # guard a tiny negative from rounding
    # survival function of chi-square = regularized upper incomplete gamma
    p = float(special.gammaincc((k - 1) / 2.0, stat / 2.0))
    return stat, p


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    """Critical difference q_alpha(k) * sqrt(k(k+1) / (6N)). Only the
    alpha = 0.05 table is embedded."""
    if alpha != 0.05:
        raise ValueError(f"only alpha=0.05 is supported, got {alpha}")
    if not 2 <= k <= 20:
        raise ValueError(f"k must be in [2, 20], got {k}")
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    return _Q_05[k - 2] * np.sqrt(k * (k + 1) / (6.0 * n))


def median_mad(values) -> tuple[float, float]:
    """Median and (unscaled) median absolute deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("need a nonempty vector")
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))


def significance_groups(mean_ranks: dict, cd: float) -> list[list[str]]:
    """Maximal sets of methods whose pairwise mean-rank gaps are all < cd.

    Methods sorted by mean rank form windows [i..j] with spread < cd; every
    window not contained in a larger one is a group, so an isolated method
    comes back as a singleton and overlapping groups are allowed.
    """
    if cd <= 0:
        raise ValueError(f"cd must be > 0, got {cd}")
    items = sorted(mean_ranks.items(), key=lambda kv: (kv[1], kv[0]))
    names = [name for name, _ in items]
    mrs = np.array([mr for _, mr in items])
    m = len(items)
    reach = [int(np.searchsorted(mrs, mrs[i] + cd, side="left")) - 1 for i in range(m)]
    groups = []
    prev_end = -1
    for i in range(m):
        j = reach[i]
        if j > prev_end:  # reach is non-decreasing, so this means "not nested"
            groups.append(names[i : j + 1])
            prev_end = j
    return groups


@dataclass
class StatReport:
    """Everything the rank analysis produces for one accuracy table."""

    mean_ranks: dict
    medians: dict
    mads: dict
    friedman_stat: float
    friedman_p: float
    cd: float
    groups: list

    def __post_init__(self):
        k = len(self.mean_ranks)
        for name, mr in self.mean_ranks.items():
            if not 1.0 - 1e-9 <= mr <= k + 1e-9:
                raise ValueError(f"mean rank {mr} of {name!r} outside [1, {k}]")
        if not 0.0 <= self.friedman_p <= 1.0:
            raise ValueError(f"p-value {self.friedman_p} outside [0, 1]")
        if self.cd <= 0:
            raise ValueError(f"cd must be > 0, got {self.cd}")

    def to_dict(self) -> dict:
        return {
            "mean_ranks": dict(sorted(self.mean_ranks.items())),
            "medians": dict(sorted(self.medians.items())),
            "mads": dict(sorted(self.mads.items())),
            "friedman_stat": self.friedman_stat,
            "friedman_p": self.friedman_p,
            "cd": self.cd,
            "groups": self.groups,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(table: AccuracyTable, alpha: float = 0.05) -> StatReport:
    """Rank the table, run the omnibus test, and group by critical
    difference."""
    ranks = rank_matrix(table)
    stat, p = friedman(ranks)
    mr = {m: float(r) for m, r in zip(table.methods, ranks.mean(axis=1))}
    med_mad = [median_mad(row) for row in table.values]
    return StatReport(
        mean_ranks=mr,
        medians={m: mm[0] for m, mm in zip(table.methods, med_mad)},
        mads={m: mm[1] for m, mm in zip(table.methods, med_mad)},
        friedman_stat=stat,
        friedman_p=p,
        cd=nemenyi_cd(table.k, table.n, alpha),
        groups=significance_groups(mr, nemenyi_cd(table.k, table.n, alpha)),
    )


def save_cd_diagram(report: StatReport, path) -> None:
    """Data behind a critical-difference diagram, no rendering: one
    `position` row per method (its mean rank) and one `segment` row per
    group (the rank span a connecting line would cover)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "name", "low", "high"])
        for name, mr in sorted(report.mean_ranks.items(), key=lambda kv: (kv[1], kv[0])):
            w.writerow(["position", name, repr(float(mr)), repr(float(mr))])
        for i, group in enumerate(report.groups):
            mrs = [report.mean_ranks[m] for m in group]
            w.writerow(["segment", f"group{i}", repr(float(min(mrs))), repr(float(max(mrs)))])
