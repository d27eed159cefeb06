"""Experiment configuration, seed derivation, and the shared parallel map.

All randomness in a pipeline run flows from a single master seed; components
get their own streams through `derive_seed(master, tag)` with a stable string
tag, so adding or reordering pipeline stages never shifts another stage's
draws.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datasets import SynthSpec

AGGREGATION_RULES = ("accuracy", "samples")

_ENV_THREADS = "OTFED_THREADS"


@dataclass
class ExperimentConfig:
    """Everything a pipeline run needs, loadable from JSON.

    Domains come either from CSV paths (`sources` + `target`) or from the
    synthetic generator (`synth`, whose last domain plays the target and
    keeps its labels aside as hidden ground truth for scoring).
    """

    sources: list[str] = field(default_factory=list)
    target: str | None = None
    synth: SynthSpec | None = None
    validation_fraction: float = 0.10
    epsilon: float = 50.0
    eta: float = 5000.0
    knn: int = 12
    rounds: int = 50
    local_epochs: int = 1
    learning_rate: float = 0.1
    batch_size: int = 32
    patience: int = 3
    seed: int = 0
    normalize_cost: bool = False
    aggregation: str = "accuracy"
    output_dir: str = "."

    def __post_init__(self):
        if self.synth is None:
            if not self.sources or self.target is None:
                raise ValueError("need either synth or sources + target")
        elif self.sources or self.target is not None:
            raise ValueError("synth excludes explicit sources/target")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
            )
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        for name in ("knn", "rounds", "local_epochs", "batch_size", "patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if self.aggregation not in AGGREGATION_RULES:
            raise ValueError(
                f"aggregation must be one of {AGGREGATION_RULES}, got {self.aggregation!r}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.synth is None:
            del d["synth"]
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if isinstance(kwargs.get("synth"), dict):
            try:
                kwargs["synth"] = SynthSpec(**kwargs["synth"])
            except TypeError as exc:
                raise ValueError(f"bad synth block: {exc}") from None
        return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Read an ExperimentConfig from a JSON file."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"no such config file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def derive_seed(master: int, tag: str) -> int:
    """Stable per-component seed: first 8 bytes (little-endian) of
    sha256("{master}/{tag}")."""
    digest = hashlib.sha256(f"{master}/{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def thread_count() -> int:
    """Parallelism cap: OTFED_THREADS if set, else the CPU count."""
    raw = os.environ.get(_ENV_THREADS)
    if raw is not None:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{_ENV_THREADS} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{_ENV_THREADS} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def pmap(fn, items):
    """Map `fn` over `items`, possibly in threads, preserving input order.

    Results are identical to [fn(x) for x in items] regardless of the thread
    count, so OTFED_THREADS never changes outputs — only wall time.
    """
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
