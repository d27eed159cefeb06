"""Simulated centralized federation over transported source domains.

A round has four phases: clients pull the current global parameters and train
locally, clients send back (parameters, sample count), the server scores every
returned model on its pseudo-labeled validation set and aggregates with
normalized coefficients, and the new global parameters go out again.

Privacy boundary: the server half of a round sees only what clients send —
parameter vectors, sample counts — plus accuracies it computes itself on its
own validation data. No server-side function accepts a client Dataset; the
test suite audits that client feature matrices are untouched outside the
client phase.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import spectral_cluster
from .config import ExperimentConfig, derive_seed, pmap
from .datasets import Dataset, load_dataset, split_target, synth_multidomain
from .model import (
    ModelParams,
    TrainConfig,
    accuracy,
    flatten,
    init_params,
    train_sgd,
    unflatten,
)
from .ot_classreg import ClassRegConfig, class_regularized_transport
from .ot_core import barycentric_map, wasserstein_distance
from .pseudolabel import (
    PseudoLabeledValidation,
    apply_pseudo_labels,
    class_cluster_cost,
    hot_correspondence,
    majority_vote,
)

COEFF_TOL = 1e-12
# an accuracy must drop below best - this to count as a decline
DECLINE_TOL = 1e-12

_CHOICES = ("original", "transported")


@dataclass
class ClientState:
    """One source domain's view of the federation."""

    client_id: str
    original_data: Dataset
    transported_data: Dataset | None = None
    active_data_choice: str = "original"
    params: ModelParams | None = None
    active: bool = True
    best_val_acc: float = float("-inf")
    decline_streak: int = 0
    representation_scores: dict | None = None

    def __post_init__(self):
        if self.active_data_choice not in _CHOICES:
            raise ValueError(f"active_data_choice must be one of {_CHOICES}")
        if self.original_data.labels is None:
            raise ValueError(f"client {self.client_id!r}: source data must be labeled")
        t = self.transported_data
        if t is not None:
            if t.n != self.original_data.n or not np.array_equal(
                t.labels, self.original_data.labels
            ):
                raise ValueError(
                    f"client {self.client_id!r}: transported data must keep the "
                    "original rows and labels"
                )
        elif self.active_data_choice == "transported":
            raise ValueError("cannot choose a transported representation that is absent")
        if self.decline_streak < 0:
            raise ValueError("decline_streak must be >= 0")

    def training_data(self) -> Dataset:
        if self.active_data_choice == "transported":
            assert self.transported_data is not None
            return self.transported_data
        return self.original_data


@dataclass
class RoundRecord:
    """What the server remembers about one aggregation round."""

    round_index: int
    client_accuracies: dict[str, float]
    coefficients: dict[str, float]
    global_val_accuracy: float

    def __post_init__(self):
        if set(self.coefficients) != set(self.client_accuracies):
            raise ValueError("coefficient/accuracy client ids disagree")
        coeffs = np.array(sorted(self.coefficients.values()))
        if coeffs.size and (coeffs.min() < -COEFF_TOL or abs(coeffs.sum() - 1.0) > COEFF_TOL):
            raise ValueError("coefficients must be nonnegative and sum to 1")

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "client_accuracies": dict(sorted(self.client_accuracies.items())),
            "coefficients": dict(sorted(self.coefficients.items())),
            "global_val_accuracy": self.global_val_accuracy,
        }


@dataclass
class ServerState:
    global_params: ModelParams
    validation: PseudoLabeledValidation
    round_index: int = 0
    history: list[RoundRecord] = field(default_factory=list)


def _weighted_average(params_list, weights: np.ndarray) -> ModelParams:
    if len(params_list) == 0:
        raise ValueError("need at least one client's parameters")
    d, k = params_list[0].d, params_list[0].k
    for p in params_list[1:]:
        if (p.d, p.k) != (d, k):
            raise ValueError(f"parameter shape mismatch: ({p.d}, {p.k}) vs ({d}, {k})")
    flat = np.stack([flatten(p) for p in params_list])
    return unflatten(weights @ flat, d, k)


def fedavg_sample_weighted(params_list, counts) -> ModelParams:
    """Componentwise mean of client parameters with weights n_i / sum(n)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size != len(params_list):
        raise ValueError("need one sample count per client")
    if counts.min() <= 0:
        raise ValueError("sample counts must be positive")
    return _weighted_average(params_list, counts / counts.sum())


def fedavg_accuracy_weighted(params_list, accuracies) -> ModelParams:
    """Componentwise mean with validation accuracies, normalized by their
    sum, as coefficients."""
    accs = np.asarray(accuracies, dtype=np.float64)
    if accs.ndim != 1 or accs.size != len(params_list):
        raise ValueError("need one accuracy per client")
    if accs.min() < 0:
        raise ValueError("accuracies must be >= 0")
    total = accs.sum()
    if total == 0:
        raise ValueError("all client accuracies are zero; nothing to weight by")
    return _weighted_average(params_list, accs / total)


def select_representation(
    client: ClientState, validation: PseudoLabeledValidation, cfg: TrainConfig
) -> ClientState:
    """Pick transported vs original data by which trains the better model.

    Two throwaway models are trained under the same config and scored on the
    pseudo-labeled validation set; the transported representation wins only on
    a strict improvement, ties keep the original.
    """
    if client.transported_data is None:
        raise ValueError(f"client {client.client_id!r} has no transported data to compare")
    val_ds = validation.to_dataset()
    orig = client.original_data
    k = int(max(orig.labels.max(), val_ds.labels.max())) + 1
    scores = {}
    for name, data in (("original", orig), ("transported", client.transported_data)):
        model = train_sgd(init_params(orig.dim, k), data, cfg)
        scores[name] = accuracy(model, val_ds)
    choice = "transported" if scores["transported"] > scores["original"] else "original"
    return replace(client, active_data_choice=choice, representation_scores=scores)


def client_update(
    client: ClientState, global_params: ModelParams, cfg: TrainConfig
) -> tuple[ModelParams, int]:
    """Client phase of a round: resume from the global parameters, train on
    the chosen representation, and return the message (params, sample count)
    that goes to the server."""
    data = client.training_data()
    return train_sgd(global_params, data, cfg), data.n


def run_round(
    server: ServerState,
    clients: list[ClientState],
    cfg: TrainConfig,
    aggregation: str = "accuracy",
) -> tuple[ServerState, list[ClientState]]:
    """One full federation round over the active clients.

    Aggregation reduces in sorted client-id order, so the result is
    independent of scheduling; inactive clients are carried through untouched.
    """
    active = sorted((c for c in clients if c.active), key=lambda c: c.client_id)
    if not active:
        raise ValueError("no active clients")
    ids = [c.client_id for c in active]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")

    # identical per-client config keeps symmetric clients symmetric; the seed
    # still varies round to round so minibatch orders are not replayed
    round_cfg = replace(cfg, seed=derive_seed(cfg.seed, f"round/{server.round_index}"))
    messages = pmap(lambda c: client_update(c, server.global_params, round_cfg), active)
    params_list = [p for p, _ in messages]
    counts = [n for _, n in messages]

    val_ds = server.validation.to_dataset()
    accs = [accuracy(p, val_ds) for p in params_list]
    if aggregation == "accuracy":
        new_global = fedavg_accuracy_weighted(params_list, accs)
        raw = np.asarray(accs, dtype=np.float64)
    elif aggregation == "samples":
        new_global = fedavg_sample_weighted(params_list, counts)
        raw = np.asarray(counts, dtype=np.float64)
    else:
        raise ValueError(f"unknown aggregation rule {aggregation!r}")
    coeffs = raw / raw.sum()

    record = RoundRecord(
        round_index=server.round_index,
        client_accuracies=dict(zip(ids, accs)),
        coefficients=dict(zip(ids, (float(c) for c in coeffs))),
        global_val_accuracy=accuracy(new_global, val_ds),
    )
    new_server = replace(
        server,
        global_params=new_global,
        round_index=server.round_index + 1,
        history=server.history + [record],
    )
    trained = dict(zip(ids, params_list))
    new_clients = [
        replace(c, params=trained[c.client_id]) if c.client_id in trained else c
        for c in clients
    ]
    return new_server, new_clients


def update_participation(
    client: ClientState, current_val_acc: float, patience: int
) -> ClientState:
    """Early-stop bookkeeping: a client whose validation accuracy declines
    `patience` rounds in a row leaves the federation for good."""
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if current_val_acc < client.best_val_acc - DECLINE_TOL:
        streak, best = client.decline_streak + 1, client.best_val_acc
    else:
        streak, best = 0, max(client.best_val_acc, current_val_acc)
    return replace(
        client,
        best_val_acc=best,
        decline_streak=streak,
        active=client.active and streak < patience,
    )


def run_federation(
    server: ServerState,
    clients: list[ClientState],
    cfg: TrainConfig,
    rounds: int,
    patience: int,
    aggregation: str = "accuracy",
) -> tuple[ServerState, list[ClientState]]:
    """Round loop with participation updates; stops early when every client
    has dropped out."""
    for _ in range(rounds):
        if not any(c.active for c in clients):
            break
        server, clients = run_round(server, clients, cfg, aggregation)
        record = server.history[-1]
        clients = [
            update_participation(c, record.client_accuracies[c.client_id], patience)
            if c.active and c.client_id in record.client_accuracies
            else c
            for c in clients
        ]
    return server, clients


@dataclass
class ExperimentReport:
    """Deterministic run summary: no timestamps, no host details."""

    config: dict
    clients: dict
    consensus_mapping: dict
    pseudo_label_accuracy: float | None
    rounds: list
    final: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "clients": self.clients,
            "consensus_mapping": self.consensus_mapping,
            "pseudo_label_accuracy": self.pseudo_label_accuracy,
            "rounds": self.rounds,
            "final": self.final,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _load_maybe_labeled(path) -> Dataset:
    """Load a CSV, taking a 'label' column when the header has one."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    has_label = any(h.strip() == "label" for h in header)
    return load_dataset(path, label_column="label" if has_label else None)


def _gather_domains(config: ExperimentConfig) -> tuple[list[Dataset], Dataset]:
    if config.synth is not None:
        domains = synth_multidomain(config.synth, seed=config.seed)
        return domains[:-1], domains[-1]
    sources = [load_dataset(p, label_column="label") for p in config.sources]
    target = _load_maybe_labeled(config.target)
    return sources, target


def run_cmda_ot(config: ExperimentConfig) -> ExperimentReport:
    """The full pipeline: pseudo-label a target validation split, transport
    every source onto the target, and federate the per-source classifiers.

    Stages: (1) split the target and spectral-cluster the validation subset;
    (2) per client, price each source class against each cluster and solve
    the two-level transport for a class<->cluster mapping; (3) reconcile
    mappings by majority vote and pseudo-label the validation rows; (4) per
    client, solve the class-regularized transport and project onto the target
    support; (5) keep whichever representation trains the better validator;
    (6) run accuracy-weighted federated rounds. Reported target accuracy uses
    the target's hidden labels when it has them, else null.
    """
    sources, target = _gather_domains(config)
    ids = [s.domain_id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate source domain ids: {sorted(ids)}")
    for s in sources:
        if s.labels is None:
            raise ValueError(f"source {s.domain_id!r} must be labeled")
        if s.dim != target.dim:
            raise ValueError(
                f"source {s.domain_id!r} has dim {s.dim}, target has {target.dim}"
            )
    k = max(s.num_classes() for s in sources)
    d = target.dim

    main, val = split_target(target, config.validation_fraction, config.seed)
    val_truth = val.labels

    clusters = spectral_cluster(
        val.features,
        k,
        neighbors=min(config.knn, val.n - 1),
        seed=derive_seed(config.seed, "cluster"),
    )

    val_cloud = Dataset(val.features)

    def analyze(src: Dataset):
        costs = class_cluster_cost(src, val.features, clusters)
        class_masses = np.bincount(src.labels, minlength=costs.shape[0]) / src.n
        cluster_masses = np.bincount(clusters.labels, minlength=clusters.k) / clusters.n
        corr = hot_correspondence(costs, class_masses, cluster_masses, client_id=src.domain_id)
        dist = wasserstein_distance(
            src, val_cloud, seed=derive_seed(config.seed, f"distance/{src.domain_id}")
        )
        return corr, dist

    analyzed = pmap(analyze, sources)
    distances = {src.domain_id: dist for src, (_, dist) in zip(sources, analyzed)}
    final_corr = majority_vote([corr for corr, _ in analyzed], distances)
    pseudo = apply_pseudo_labels(clusters, final_corr, val.features)
    pseudo_acc = (
        None if val_truth is None else float(np.mean(pseudo.pseudo_labels == val_truth))
    )

    reg_cfg = ClassRegConfig(epsilon=config.epsilon, eta=config.eta)

    def transport(src: Dataset) -> Dataset:
        coup = class_regularized_transport(
            src, target.features, reg_cfg, normalize_cost=config.normalize_cost
        )
        feats = barycentric_map(coup, target.features)
        return Dataset(feats, src.labels, domain_id=src.domain_id)

    transported = pmap(transport, sources)

    select_cfg = TrainConfig(
        learning_rate=config.learning_rate,
        epochs=config.rounds * config.local_epochs,
        batch_size=config.batch_size,
        seed=derive_seed(config.seed, "select"),
    )
    clients = [
        ClientState(src.domain_id, src, transported_data=tr, params=init_params(d, k))
        for src, tr in zip(sources, transported)
    ]
    clients = pmap(lambda c: select_representation(c, pseudo, select_cfg), clients)

    train_cfg = TrainConfig(
        learning_rate=config.learning_rate,
        epochs=config.local_epochs,
        batch_size=config.batch_size,
        seed=derive_seed(config.seed, "train"),
    )
    server = ServerState(init_params(d, k), pseudo)
    server, clients = run_federation(
        server,
        clients,
        train_cfg,
        rounds=config.rounds,
        patience=config.patience,
        aggregation=config.aggregation,
    )

    target_acc = (
        accuracy(server.global_params, main) if main.labels is not None else None
    )
    client_info = {
        c.client_id: {
            "chosen": c.active_data_choice,
            "representation_scores": c.representation_scores,
            "target_distance": distances[c.client_id],
            "mapping": {str(t): cls for t, cls in sorted(corr.mapping.items())},
            "active_at_end": c.active,
        }
        for c, (corr, _) in zip(clients, analyzed)
    }
    return ExperimentReport(
        config=config.to_dict(),
        clients=client_info,
        consensus_mapping={str(t): cls for t, cls in sorted(final_corr.mapping.items())},
        pseudo_label_accuracy=pseudo_acc,
        rounds=[r.to_dict() for r in server.history],
        final={
            "target_accuracy": target_acc,
            "validation_accuracy": accuracy(server.global_params, pseudo.to_dataset()),
            "rounds_run": len(server.history),
            "active_clients": sum(c.active for c in clients),
        },
    )
