"""Dataset containers, CSV ingestion, synthetic multi-domain generation, splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WEIGHT_TOL = 1e-12

# rng stream tags so each generator component draws from its own substream
_STREAM_SHARED = 101
_STREAM_DOMAIN = 202
_STREAM_SPLIT = 303


class LoadError(ValueError):
    """Raised when a dataset file violates the CSV contract."""


@dataclass
class Dataset:
    """A weighted point cloud with optional class labels.

    features : (n, d) float array, all entries finite.
    labels   : optional (n,) int array with values in {0..k-1}.
    domain_id: tag naming the domain the sample came from.
    weights  : (n,) nonnegative, summing to 1 (uniform by default).
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    domain_id: str = ""
    weights: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        n, d = feats.shape
        if n < 1 or d < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite entries")
        self.features = feats

        if self.labels is not None:
            labs = np.asarray(self.labels)
            if labs.shape != (n,):
                raise ValueError(f"labels shape {labs.shape} != ({n},)")
            if not np.issubdtype(labs.dtype, np.integer):
                if not np.all(labs == np.floor(labs)):
                    raise ValueError("labels must be integers")
                labs = labs.astype(np.int64)
            if labs.min() < 0:
                raise ValueError("labels must be nonnegative class ids")
            self.labels = labs.astype(np.int64)

        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (n,):
                raise ValueError(f"weights shape {w.shape} != ({n},)")
            if w.min() < 0:
                raise ValueError("weights must be nonnegative")
            if abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        self.weights = w

        for arr in (self.features, self.labels, self.weights):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def num_classes(self) -> int:
        if self.labels is None:
            raise ValueError(f"dataset {self.domain_id!r} has no labels")
        return int(self.labels.max()) + 1

    def without_labels(self) -> "Dataset":
        return Dataset(self.features, None, self.domain_id, self.weights)

    def subset(self, idx: np.ndarray, domain_id: str | None = None) -> "Dataset":
        """Rows at `idx`, weights reset to uniform."""
        idx = np.asarray(idx)
        return Dataset(
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.domain_id if domain_id is None else domain_id,
        )


@dataclass
class SynthSpec:
    """Parameters of the synthetic multi-domain generator."""

    num_domains: int
    classes: int
    dim: int
    samples_per_domain: int
    shift_scale: float = 0.0
    rotation: bool = False
    noise_sigma: float = 1.0

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.classes > self.dim + 1:
            raise ValueError("need classes <= dim + 1 to embed the class simplex")
        if self.samples_per_domain < self.classes:
            raise ValueError("need at least one sample per class")
        if self.shift_scale < 0:
            raise ValueError("shift_scale must be >= 0")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")


def load_dataset(path, label_column: str | None = None) -> Dataset:
    """Load a Dataset from CSV.

    Expected format: header row with feature columns f0..f{d-1} (any extra
    columns are ignored unless named by `label_column`), '.' decimal
    separator, one sample per row. Labels must be nonnegative integers.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LoadError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]

    feat_cols: dict[int, int] = {}
    for pos, name in enumerate(header):
        if name.startswith("f") and name[1:].isdigit():
            feat_cols[int(name[1:])] = pos
    d = len(feat_cols)
    if d == 0:
        raise LoadError(f"{path}: no feature columns f0..f{{d-1}} in header")
    if sorted(feat_cols) != list(range(d)):
        missing = sorted(set(range(max(feat_cols) + 1)) - set(feat_cols))
        raise LoadError(f"{path}: feature columns not contiguous, missing f{missing[0]}")

    label_pos = None
    if label_column is not None:
        if label_column not in header:
            raise LoadError(f"{path}: no column named {label_column!r}")
        label_pos = header.index(label_column)

    data = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    if not data:
        raise LoadError(f"{path}: no data rows")

    feats = np.empty((len(data), d))
    labels = np.empty(len(data), dtype=np.int64) if label_pos is not None else None
    for i, row in enumerate(data):
        rownum = i + 1
        if len(row) != len(header):
            raise LoadError(f"{path}: row {rownum}: expected {len(header)} cells, got {len(row)}")
        for j in range(d):
            cell = row[feat_cols[j]].strip()
            try:
                feats[i, j] = float(cell)
            except ValueError:
                raise LoadError(f"{path}: row {rownum}, column f{j}: not a number: {cell!r}") from None
        if label_pos is not None:
            cell = row[label_pos].strip()
            try:
                val = float(cell)
            except ValueError:
                raise LoadError(
                    f"{path}: row {rownum}, column {label_column}: not a number: {cell!r}"
                ) from None
            if not val.is_integer() or val < 0:
                raise LoadError(
                    f"{path}: row {rownum}, column {label_column}: "
                    f"label must be a nonnegative integer, got {cell!r}"
                )
            labels[i] = int(val)
    if not np.all(np.isfinite(feats)):
        bad = np.argwhere(~np.isfinite(feats))[0]
        raise LoadError(f"{path}: row {bad[0] + 1}, column f{bad[1]}: non-finite value")
    return Dataset(feats, labels, domain_id=path.stem)


def save_dataset(ds: Dataset, path) -> None:
    """Write a Dataset in the CSV format load_dataset reads."""
    path = Path(path)
    header = [f"f{j}" for j in range(ds.dim)] + (["label"] if ds.labels is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(int(ds.labels[i]))
            w.writerow(row)


def _orthonormal_basis(d: int, m: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((d, m))
    q, r = np.linalg.qr(g)
    # fix signs so the basis is a pure function of the rng draw
    return q * np.sign(np.diag(r))


def _in_span_unit(basis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    coef = rng.standard_normal(basis.shape[1])
    coef /= np.linalg.norm(coef)
    return basis @ coef


def synth_multidomain(spec: SynthSpec, seed: int) -> list[Dataset]:
    """Generate `num_domains` labeled datasets sharing one class layout.

    Every domain draws per-class isotropic Gaussian blobs around a shared
    simplex of class centers, then applies its own rigid transform: a random
    rotation of the class subspace (if `rotation`) followed by a translation
    of magnitude `shift_scale` along a random direction inside that subspace.
    Keeping the transforms in the subspace where the class geometry lives
    means shift_scale directly displaces decision boundaries; shifts below
    half the center spacing (2*noise_sigma*...) keep class correspondence
    across domains unambiguous.
    """
    shared_rng = np.random.default_rng([seed, _STREAM_SHARED])
    basis = _orthonormal_basis(spec.dim, spec.classes - 1, shared_rng)  # (d, k-1)
    # class centers: regular simplex, side 4*noise_sigma, living in span(basis)
    coords = _simplex_coords(spec.classes) * 4.0 * spec.noise_sigma
    centers = coords @ basis.T  # (k, d)

    k = spec.classes
    per_class = np.full(k, spec.samples_per_domain // k)
    per_class[: spec.samples_per_domain % k] += 1

    out = []
    for dom in range(spec.num_domains):
        rng = np.random.default_rng([seed, _STREAM_DOMAIN, dom])
        # draw the transform unconditionally so the sample noise stream is
        # identical across (shift_scale, rotation) settings at a fixed seed
        rot = _random_orthogonal(k - 1, rng)
        shift = spec.shift_scale * _in_span_unit(basis, rng)

        feats = np.empty((spec.samples_per_domain, spec.dim))
        labels = np.empty(spec.samples_per_domain, dtype=np.int64)
        pos = 0
        for c in range(k):
            m = per_class[c]
            pts = centers[c] + spec.noise_sigma * rng.standard_normal((m, spec.dim))
            feats[pos : pos + m] = pts
            labels[pos : pos + m] = c
            pos += m
        # rotate inside the class subspace: x -> x + B (R - I) B^T x
        if spec.rotation:
            proj = feats @ basis  # (n, k-1)
            feats = feats + (proj @ (rot.T - np.eye(k - 1))) @ basis.T
        feats = feats + shift
        out.append(Dataset(feats, labels, domain_id=f"domain{dom}"))
    return out


def _simplex_coords(k: int) -> np.ndarray:
    """Vertices of a regular unit-side simplex in (k-1) dims, centered."""
    verts = np.eye(k) - 1.0 / k
    u, s, _ = np.linalg.svd(verts, full_matrices=False)
    coords = u[:, : k - 1] * s[: k - 1]
    # the embedded simplex has side sqrt(2); normalize to unit side
    coords /= np.sqrt(2.0)
    # fix orientation deterministically
    signs = np.sign(coords[0, :])
    signs[signs == 0] = 1.0
    return coords * signs


def _random_orthogonal(m: int, rng: np.random.Generator) -> np.ndarray:
    if m == 0:
        return np.eye(0)
    g = rng.standard_normal((m, m))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def split_target(target: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition `target` into (main, validation) with |validation| =
    round(fraction * n), at least 1 and at most n - 1."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = target.n
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_val = int(np.floor(fraction * n + 0.5))  # round half up
    n_val = max(1, min(n - 1, n_val))
    rng = np.random.default_rng([seed, _STREAM_SPLIT])
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    main_idx = np.sort(perm[n_val:])
    return target.subset(main_idx), target.subset(val_idx)


def standardize(train_stats_source: Dataset, others: list[Dataset]) -> list[Dataset]:
    """Z-score all datasets per feature with mean/std (population) taken from
    `train_stats_source`; constant features pass through unscaled."""
    mu = train_stats_source.features.mean(axis=0)
    sd = train_stats_source.features.std(axis=0)  # population std
    scale = np.where(sd == 0.0, 1.0, sd)
    out = []
    for ds in others:
        if ds.dim != train_stats_source.dim:
            raise ValueError(f"dimension mismatch: {ds.dim} != {train_stats_source.dim}")
        out.append(Dataset((ds.features - mu) / scale, ds.labels, ds.domain_id, ds.weights))
    return out
