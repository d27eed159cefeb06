import csv
import json
from pathlib import Path

import numpy as np
import pytest

from otfed.cli import main
from otfed.datasets import load_dataset

DATA = Path(__file__).parent / "data"

SYNTH_CONFIG = {
    "synth": {
        "num_domains": 3,
        "classes": 2,
        "dim": 4,
        "samples_per_domain": 50,
        "shift_scale": 3.0,
        "noise_sigma": 1.5,
    },
    "validation_fraction": 0.2,
    "epsilon": 0.02,
    "eta": 2.0,
    "normalize_cost": True,
    "knn": 6,
    "rounds": 4,
    "patience": 4,
    "learning_rate": 0.5,
    "batch_size": 32,
    "seed": 3,
}


def write_config(tmp_path, **over):
    raw = dict(SYNTH_CONFIG, **over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def make_domains(tmp_path, seed=5):
    out = tmp_path / "domains"
    rc = main(
        [
            "synth",
            "--domains", "3",
            "--classes", "2",
            "--dim", "4",
            "--samples", "60",
            "--shift-scale", "3",
            "--noise-sigma", "1.5",
            "--seed", str(seed),
            "--output-dir", str(out),
        ]
    )
    assert rc == 0
    return [out / "domain0.csv", out / "domain1.csv"], out / "target.csv"


class TestRun:
    def test_synth_config_runs_to_completion(self, tmp_path, capsys):
        cfg = write_config(tmp_path, output_dir=str(tmp_path / "out"))
        assert main(["run", "--config", str(cfg)]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert len(report["rounds"]) == SYNTH_CONFIG["rounds"]
        assert report["final"]["validation_accuracy"] >= 0.5
        with open(tmp_path / "out" / "accuracy.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + SYNTH_CONFIG["rounds"]
        assert rows[0][0] == "round"
        assert "report.json" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, output_dir=str(tmp_path / "out"))
        assert main(["run", "--config", str(cfg)]) == 0
        first = (tmp_path / "out" / "report.json").read_bytes()
        first_acc = (tmp_path / "out" / "accuracy.csv").read_bytes()
        assert main(["run", "--config", str(cfg)]) == 0
        assert (tmp_path / "out" / "report.json").read_bytes() == first
        assert (tmp_path / "out" / "accuracy.csv").read_bytes() == first_acc

    def test_flags_override_config(self, tmp_path):
        cfg = write_config(tmp_path, output_dir=str(tmp_path / "a"))
        assert main(["run", "--config", str(cfg), "--seed", "9",
                     "--output-dir", str(tmp_path / "b")]) == 0
        report = json.loads((tmp_path / "b" / "report.json").read_text())
        assert report["config"]["seed"] == 9
        assert not (tmp_path / "a").exists()

    def test_run_from_csv_files(self, tmp_path):
        sources, target = make_domains(tmp_path)
        out = tmp_path / "out"
        rc = main(
            ["run",
             "--sources", *map(str, sources),
             "--target", str(target),
             "--validation-fraction", "0.2",
             "--knn", "6",
             "--rounds", "3",
             "--epsilon", "0.02",
             "--eta", "2.0",
             "--normalize-cost",
             "--learning-rate", "0.5",
             "--seed", "5",
             "--output-dir", str(out)]
        )
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        # synthetic target ships with labels, so the held-out score is real
        assert report["final"]["target_accuracy"] is not None

    def test_missing_source_path_mentions_it(self, tmp_path, capsys):
        rc = main(["run", "--sources", "nope/missing.csv",
                   "--target", "also_missing.csv",
                   "--output-dir", str(tmp_path)])
        assert rc != 0
        err = capsys.readouterr().err
        assert "nope/missing.csv" in err
        assert "Traceback" not in err


class TestTransport:
    def test_writes_coupling_and_transported(self, tmp_path):
        (src, _), target = make_domains(tmp_path)
        out = tmp_path / "tr"
        rc = main(
            ["transport", "--source", str(src), "--target", str(target),
             "--epsilon", "0.02", "--eta", "2.0", "--normalize-cost",
             "--output-dir", str(out)]
        )
        assert rc == 0
        plan = np.loadtxt(out / "coupling.csv", delimiter=",")
        source = load_dataset(src, label_column="label")
        assert plan.shape == (60, 60)
        assert abs(plan.sum() - 1.0) < 1e-9
        transported = load_dataset(out / "transported.csv", label_column="label")
        assert transported.n == source.n
        np.testing.assert_array_equal(transported.labels, source.labels)
        meta = json.loads((out / "coupling.csv.meta.json").read_text())
        assert meta["shape"] == [60, 60]


class TestCluster:
    def test_assignment_covers_all_rows(self, tmp_path):
        _, target = make_domains(tmp_path)
        out = tmp_path / "cl"
        rc = main(["cluster", "--input", str(target), "--k", "2",
                   "--knn", "6", "--seed", "1", "--output-dir", str(out)])
        assert rc == 0
        with open(out / "clusters.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len(rows) == 60
        assert set(int(r[1]) for r in rows) == {0, 1}


class TestPseudolabel:
    def test_outputs_labeled_split_and_mapping(self, tmp_path):
        sources, target = make_domains(tmp_path)
        out = tmp_path / "pl"
        rc = main(
            ["pseudolabel", "--sources", *map(str, sources),
             "--target", str(target), "--validation-fraction", "0.2",
             "--knn", "6", "--seed", "5", "--output-dir", str(out)]
        )
        assert rc == 0
        val = load_dataset(out / "pseudo_validation.csv", label_column="label")
        assert val.n == 12  # 20% of 60
        mapping = json.loads((out / "mapping.json").read_text())
        assert set(mapping["consensus"]) == {"0", "1"}
        assert set(mapping["per_client"]) == {"domain0", "domain1"}
        assert all(d > 0 for d in mapping["target_distances"].values())


class TestStats:
    def test_vlsc_report_matches_published_ranks(self, tmp_path):
        out = tmp_path / "st"
        rc = main(["stats", "--input", str(DATA / "vlsc_table.csv"),
                   "--output-dir", str(out)])
        assert rc == 0
        report = json.loads((out / "stats_report.json").read_text())
        assert report["mean_ranks"] == pytest.approx(
            {"CMSD": 6.8, "DS": 6.2, "TCA+CMSD": 4.6, "TCA+WAF": 4.0,
             "TCA+WDS": 3.0, "TCA+WDSC": 2.4, "CMDA-OT": 1.0},
            abs=1e-9,
        )
        assert report["friedman_p"] < 0.001

    def test_office_report_matches_published_ranks(self, tmp_path):
        out = tmp_path / "st"
        rc = main(["stats", "--input", str(DATA / "office_table.csv"),
                   "--cd-diagram", "--output-dir", str(out)])
        assert rc == 0
        report = json.loads((out / "stats_report.json").read_text())
        assert report["mean_ranks"] == pytest.approx(
            {"ResNet-101": 6.0, "DAN": 4.1, "DCTN": 4.1, "MCD": 3.1,
             "M3SDA": 1.7, "CMDA-OT": 2.0},
            abs=1e-9,
        )
        assert (out / "cd_diagram.csv").exists()

    def test_two_method_table(self, tmp_path):
        table = tmp_path / "two.csv"
        table.write_text("method,s,t,u\nfirst,90,80,70\nsecond,85,75,72\n")
        out = tmp_path / "st"
        assert main(["stats", "--input", str(table), "--output-dir", str(out)]) == 0
        report = json.loads((out / "stats_report.json").read_text())
        assert report["cd"] == pytest.approx(1.960 / np.sqrt(3))
        assert report["mean_ranks"]["first"] == pytest.approx(4 / 3)

    def test_unsupported_alpha_is_an_error(self, tmp_path, capsys):
        rc = main(["stats", "--input", str(DATA / "vlsc_table.csv"),
                   "--alpha", "0.01", "--output-dir", str(tmp_path)])
        assert rc != 0
        assert "alpha" in capsys.readouterr().err


class TestSynth:
    def test_deterministic_outputs(self, tmp_path):
        (a0, _), at = make_domains(tmp_path / "a", seed=11)
        (b0, _), bt = make_domains(tmp_path / "b", seed=11)
        assert a0.read_bytes() == b0.read_bytes()
        assert at.read_bytes() == bt.read_bytes()
        (c0, _), _ = make_domains(tmp_path / "c", seed=12)
        assert a0.read_bytes() != c0.read_bytes()

    def test_last_domain_is_unshifted_target(self, tmp_path):
        _, target = make_domains(tmp_path)
        ds = load_dataset(target, label_column="label")
        assert ds.n == 60
        assert ds.num_classes() == 2


class TestUsageErrors:
    def test_no_subcommand_prints_usage(self, capsys):
        assert main([]) != 0
        err = capsys.readouterr().err
        assert "usage:" in err
        assert "Traceback" not in err

    def test_unknown_flag_prints_usage(self, capsys):
        assert main(["stats", "--frobnicate"]) != 0
        err = capsys.readouterr().err
        assert "usage:" in err

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "subcommand" in capsys.readouterr().out or True

    def test_bad_config_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", "--config", str(bad)]) != 0
        assert "Traceback" not in capsys.readouterr().err
