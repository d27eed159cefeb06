"""Command-line front end.

Subcommands compose the pipeline pieces: `run` executes the whole experiment
from a config file, `transport`/`cluster`/`pseudolabel` expose the individual
stages, `stats` runs the rank analysis on an accuracy table, and `synth`
writes the synthetic benchmark domains to disk. Flags mirror config keys and
override values loaded from --config.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .clustering import save_assignment, spectral_cluster
from .config import ExperimentConfig, derive_seed, load_config
from .datasets import Dataset, SynthSpec, load_dataset, save_dataset, split_target, synth_multidomain
from .federation import run_cmda_ot
from .ot_classreg import ClassRegConfig, class_regularized_transport
from .ot_core import barycentric_map, save_coupling, wasserstein_distance
from .pseudolabel import apply_pseudo_labels, class_cluster_cost, hot_correspondence, majority_vote
from .stats import evaluate, load_accuracy_table, save_cd_diagram

# config keys that take a value and can be overridden from the command line
_OVERRIDE_KEYS = (
    "sources",
    "target",
    "validation_fraction",
    "epsilon",
    "eta",
    "knn",
    "rounds",
    "local_epochs",
    "learning_rate",
    "batch_size",
    "patience",
    "seed",
    "normalize_cost",
    "aggregation",
    "output_dir",
)


def _maybe_labeled(path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    has_label = any(h.strip() == "label" for h in header)
    return load_dataset(path, label_column="label" if has_label else None)


def _check_paths(paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")


def _out_dir(args) -> Path:
    out = Path(getattr(args, "output_dir", ".") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_run(sub) -> None:
    p = sub.add_parser("run", help="run the full pipeline from a config")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--sources", nargs="+", help="labeled source CSVs")
    p.add_argument("--target", help="target CSV (labels optional, used only for scoring)")
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--knn", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--normalize-cost", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--aggregation", choices=("accuracy", "samples"))
    p.add_argument("--output-dir")
    p.set_defaults(fn=cmd_run)


def cmd_run(args) -> int:
    merged = load_config(args.config).to_dict() if args.config else {}
    for key in _OVERRIDE_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    config = ExperimentConfig.from_dict(merged)
    if config.synth is None:
        _check_paths(list(config.sources) + [config.target])

    report = run_cmda_ot(config)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(report.to_json(), encoding="utf-8")

    acc_path = out / "accuracy.csv"
    client_ids = sorted(report.clients)
    with open(acc_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round"] + [f"acc_{c}" for c in client_ids] + ["global_val_accuracy"])
        for rec in report.rounds:
            row = [rec["round"]]
            row += [repr(float(rec["client_accuracies"].get(c, float("nan")))) for c in client_ids]
            row.append(repr(float(rec["global_val_accuracy"])))
            w.writerow(row)

    final = report.final
    shown = "null" if final["target_accuracy"] is None else f"{final['target_accuracy']:.4f}"
    print(f"wrote {report_path} and {acc_path}")
    print(
        f"rounds={final['rounds_run']} target_accuracy={shown} "
        f"validation_accuracy={final['validation_accuracy']:.4f}"
    )
    return 0


def _add_transport(sub) -> None:
    p = sub.add_parser("transport", help="transport one labeled source onto a target")
    p.add_argument("--source", required=True, help="labeled source CSV")
    p.add_argument("--target", required=True, help="target CSV (labels ignored)")
    p.add_argument("--epsilon", type=float, default=50.0)
    p.add_argument("--eta", type=float, default=5000.0)
    p.add_argument("--normalize-cost", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_transport)


def cmd_transport(args) -> int:
    _check_paths([args.source, args.target])
    source = load_dataset(args.source, label_column="label")
    target = _maybe_labeled(args.target)
    cfg = ClassRegConfig(epsilon=args.epsilon, eta=args.eta)
    coupling = class_regularized_transport(
        source, target.features, cfg, normalize_cost=args.normalize_cost
    )
    feats = barycentric_map(coupling, target.features)

    out = _out_dir(args)
    coupling_path = out / "coupling.csv"
    transported_path = out / "transported.csv"
    save_coupling(coupling, coupling_path)
    save_dataset(Dataset(feats, source.labels, domain_id=source.domain_id), transported_path)
    print(f"wrote {coupling_path} and {transported_path}")
    return 0


def _add_cluster(sub) -> None:
    p = sub.add_parser("cluster", help="spectral-cluster the rows of a CSV")
    p.add_argument("--input", required=True, help="feature CSV (labels ignored)")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--knn", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_cluster)


def cmd_cluster(args) -> int:
    _check_paths([args.input])
    data = _maybe_labeled(args.input)
    assignment = spectral_cluster(
        data.features,
        args.k,
        neighbors=min(args.knn, data.n - 1),
        seed=args.seed,
    )
    out = _out_dir(args)
    path = out / "clusters.csv"
    save_assignment(assignment, path)
    sizes = np.bincount(assignment.labels, minlength=args.k)
    print(f"wrote {path} (cluster sizes: {', '.join(str(int(s)) for s in sizes)})")
    return 0


def _add_pseudolabel(sub) -> None:
    p = sub.add_parser(
        "pseudolabel", help="pseudo-label a target validation split via cluster matching"
    )
    p.add_argument("--sources", nargs="+", required=True, help="labeled source CSVs")
    p.add_argument("--target", required=True, help="target CSV")
    p.add_argument("--validation-fraction", type=float, default=0.10)
    p.add_argument("--knn", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_pseudolabel)


def cmd_pseudolabel(args) -> int:
    _check_paths(list(args.sources) + [args.target])
    sources = [load_dataset(p, label_column="label") for p in args.sources]
    target = _maybe_labeled(args.target)
    k = max(s.num_classes() for s in sources)

    _, val = split_target(target, args.validation_fraction, args.seed)
    clusters = spectral_cluster(
        val.features,
        k,
        neighbors=min(args.knn, val.n - 1),
        seed=derive_seed(args.seed, "cluster"),
    )
    val_cloud = Dataset(val.features)
    correspondences, distances = [], {}
    for src in sources:
        costs = class_cluster_cost(src, val.features, clusters)
        class_masses = np.bincount(src.labels, minlength=costs.shape[0]) / src.n
        cluster_masses = np.bincount(clusters.labels, minlength=clusters.k) / clusters.n
        correspondences.append(
            hot_correspondence(costs, class_masses, cluster_masses, client_id=src.domain_id)
        )
        distances[src.domain_id] = wasserstein_distance(
            src, val_cloud, seed=derive_seed(args.seed, f"distance/{src.domain_id}")
        )
    final = majority_vote(correspondences, distances)
    pseudo = apply_pseudo_labels(clusters, final, val.features)

    out = _out_dir(args)
    val_path = out / "pseudo_validation.csv"
    map_path = out / "mapping.json"
    save_dataset(pseudo.to_dataset(), val_path)
    map_path.write_text(
        json.dumps(
            {
                "consensus": {str(t): c for t, c in sorted(final.mapping.items())},
                "per_client": {
                    corr.client_id: {str(t): c for t, c in sorted(corr.mapping.items())}
                    for corr in correspondences
                },
                "target_distances": {c: distances[c] for c in sorted(distances)},
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"wrote {val_path} and {map_path}")
    return 0


def _add_stats(sub) -> None:
    p = sub.add_parser("stats", help="rank analysis of a methods-by-samples accuracy table")
    p.add_argument("--input", required=True, help="accuracy table CSV")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--cd-diagram", action="store_true", help="also write cd_diagram.csv")
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_stats)


def cmd_stats(args) -> int:
    _check_paths([args.input])
    table = load_accuracy_table(args.input)
    report = evaluate(table, alpha=args.alpha)

    out = _out_dir(args)
    path = out / "stats_report.json"
    path.write_text(report.to_json(), encoding="utf-8")
    wrote = [str(path)]
    if args.cd_diagram:
        cd_path = out / "cd_diagram.csv"
        save_cd_diagram(report, cd_path)
        wrote.append(str(cd_path))
    print(f"wrote {' and '.join(wrote)}")
    print(
        f"friedman={report.friedman_stat:.4f} p={report.friedman_p:.3e} cd={report.cd:.3f}"
    )
    return 0


def _add_synth(sub) -> None:
    p = sub.add_parser("synth", help="write the synthetic benchmark domains as CSVs")
    p.add_argument("--domains", type=int, required=True, help="total domains; last is the target")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--samples", type=int, required=True, help="samples per domain")
    p.add_argument("--shift-scale", type=float, default=0.0)
    p.add_argument("--rotation", action="store_true")
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(fn=cmd_synth)


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_domains=args.domains,
        classes=args.classes,
        dim=args.dim,
        samples_per_domain=args.samples,
        shift_scale=args.shift_scale,
        rotation=args.rotation,
        noise_sigma=args.noise_sigma,
    )
    domains = synth_multidomain(spec, seed=args.seed)
    out = _out_dir(args)
    paths = []
    for ds in domains[:-1]:
        paths.append(out / f"{ds.domain_id}.csv")
        save_dataset(ds, paths[-1])
    paths.append(out / "target.csv")
    save_dataset(domains[-1], paths[-1])
    print("wrote " + ", ".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otfed",
        description="multi-source domain adaptation via optimal transport, "
        "federated aggregation, and rank statistics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_transport(sub)
    _add_cluster(sub)
    _add_pseudolabel(sub)
    _add_stats(sub)
    _add_synth(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage or help
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
