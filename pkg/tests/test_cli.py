import hashlib
import json
import os

import numpy as np
import pytest

from cobranch.cli import main, run_experiment
from cobranch.config import ConfigError, effective_config, load_config

SMALL = [
    "--set", "dataset.num_classes=5",
    "--set", "dataset.d_in=6",
    "--set", "dataset.n_max=24",
    "--set", "dataset.rho_l=6",
    "--set", "dataset.rho_u=6",
    "--set", "dataset.num_known=3",
    "--set", "dataset.test_per_class=8",
    "--set", "train.total_epochs=4",
    "--set", "train.batch_size=32",
    "--set", "train.warmup_epochs=1",
    "--set", "train.reestimate_interval=2",
    "--set", "train.base_lr=0.05",
]


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def small_cfg(**extra):
    raw = {
        "dataset": {"num_classes": 5, "d_in": 6, "n_max": 24, "rho_l": 6, "rho_u": 6,
                    "num_known": 3, "test_per_class": 8},
        "train": {"total_epochs": 4, "batch_size": 32, "warmup_epochs": 1,
                  "reestimate_interval": 2, "base_lr": 0.05},
    }
    for block, kv in extra.items():
        raw[block].update(kv)
    return effective_config(raw)


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            effective_config({"train": {"learning_rate": 0.1}})
        with pytest.raises(ConfigError, match="unknown config key"):
            effective_config({"trian": {}})

    def test_defaults_materialized(self):
        cfg = effective_config({})
        assert cfg["train"]["warmup_epochs"] == 20  # 10% of 200
        assert cfg["train"]["alpha"] == 0.8
        assert cfg["train"]["beta"] == 0.5
        assert cfg["train"]["k"] == 0.5
        assert cfg["train"]["smoothing_p"] == 0.5
        assert cfg["train"]["temperature"] == 1.0
        assert cfg["train"]["reestimate_interval"] == 10
        assert cfg["train"]["metric"] == "dot"

    def test_overrides_apply(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train": {"base_lr": 0.2}}))
        cfg = load_config(str(path), ["train.base_lr=0.3", "dataset.num_known=2"])
        assert cfg["train"]["base_lr"] == 0.3
        assert cfg["dataset"]["num_known"] == 2

    def test_embeddings_kind_requires_paths(self):
        with pytest.raises(ConfigError, match="requires"):
            effective_config({"dataset": {"kind": "embeddings"}})

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(str(path), [])


class TestGenData:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            rc = main(["gen-data", "--seed", "5", "--out", str(out), *SMALL])
            assert rc == 0
        for name in ("train.csv", "test.csv", "meta.json"):
            assert sha(a / name) == sha(b / name)

    def test_balanced_config_counts(self, tmp_path, capsys):
        rc = main([
            "gen-data", "--seed", "1", "--out", str(tmp_path),
            "--set", "dataset.num_classes=4", "--set", "dataset.d_in=4",
            "--set", "dataset.n_max=10", "--set", "dataset.rho_l=1",
            "--set", "dataset.rho_u=1", "--set", "dataset.num_known=2",
            "--set", "dataset.test_per_class=3",
        ])
        assert rc == 0
        table = capsys.readouterr().out
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["true_counts"] == [10, 10, 10, 10]
        assert "known" in table and "novel" in table

    def test_unequal_ratios_accepted(self, tmp_path):
        rc = main([
            "gen-data", "--seed", "2", "--out", str(tmp_path),
            "--set", "dataset.num_classes=6", "--set", "dataset.d_in=5",
            "--set", "dataset.n_max=40", "--set", "dataset.rho_l=2",
            "--set", "dataset.rho_u=10", "--set", "dataset.num_known=3",
            "--set", "dataset.test_per_class=4",
        ])
        assert rc == 0
        meta = json.loads((tmp_path / "meta.json").read_text())
        from cobranch.data import load_embeddings

        pool = load_embeddings(str(tmp_path / "train.csv"))
        labeled = [s for s in pool if s.label is not None]
        counts = np.bincount([s.label for s in labeled], minlength=6)
        nz = counts[counts > 0]
        assert nz.max() / nz.min() <= 3.0  # labeled pool follows rho_l=2, not 10

    def test_gen_data_needs_seed(self, capsys):
        rc = main(["gen-data", "--out", "/tmp/nowhere_gen"])
        assert rc == 2


class TestTrainEval:
    def test_train_then_eval(self, tmp_path):
        rc = main(["train", "--seed", "7", "--out", str(tmp_path / "run"), *SMALL])
        assert rc == 0
        assert (tmp_path / "run" / "checkpoint.json").exists()
        telemetry = (tmp_path / "run" / "telemetry.jsonl").read_text().splitlines()
        assert len(telemetry) == 5  # config record + 4 epochs
        assert "config" in json.loads(telemetry[0])

        rc = main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"),
                   "--seeds", "0", "--out", str(tmp_path / "eval")])
        assert rc == 0
        report = json.loads((tmp_path / "eval" / "report_seed0.json").read_text())
        agg = json.loads((tmp_path / "eval" / "aggregate.json").read_text())
        assert agg["metrics"]["acc_all"]["mean"] == report["report"]["acc_all"]
        assert agg["metrics"]["acc_all"]["std"] == 0.0

    def test_missing_data_file_exit_2(self, tmp_path, capsys):
        rc = main([
            "train", "--seed", "0", "--out", str(tmp_path),
            "--set", "dataset.kind=embeddings",
            "--set", "dataset.path=/tmp/definitely_missing.csv",
            "--set", "dataset.meta_path=/tmp/definitely_missing_meta.json",
            "--set", "dataset.test_path=/tmp/definitely_missing_test.csv",
        ])
        assert rc == 2
        assert "definitely_missing" in capsys.readouterr().err

    def test_aggregate_is_mean_of_seeds(self, tmp_path):
        main(["train", "--seed", "9", "--out", str(tmp_path / "run"), *SMALL])
        rc = main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"),
                   "--seeds", "0,1,2", "--out", str(tmp_path / "eval")])
        assert rc == 0
        per_seed = []
        for s in (0, 1, 2):
            rows = (tmp_path / "eval" / f"report_seed{s}.csv").read_text().splitlines()
            header = rows[0].split(",")
            values = rows[1].split(",")
            per_seed.append(float(values[header.index("acc_all")]))
        agg = json.loads((tmp_path / "eval" / "aggregate.json").read_text())
        assert agg["metrics"]["acc_all"]["mean"] == pytest.approx(np.mean(per_seed), abs=1e-12)

    def test_perfect_features_fixture(self, tmp_path):
        args = [
            "--set", "dataset.num_classes=4", "--set", "dataset.d_in=6",
            "--set", "dataset.n_max=30", "--set", "dataset.rho_l=3",
            "--set", "dataset.rho_u=3", "--set", "dataset.num_known=2",
            "--set", "dataset.test_per_class=10",
            "--set", "dataset.class_separation=50", "--set", "dataset.noise_scale=0.01",
            "--set", "train.total_epochs=6", "--set", "train.batch_size=32",
            "--set", "train.warmup_epochs=2", "--set", "train.reestimate_interval=3",
            "--set", "train.base_lr=0.02",
        ]
        main(["train", "--seed", "3", "--out", str(tmp_path / "run"), *args])
        main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"),
              "--seeds", "0", "--out", str(tmp_path / "eval")])
        report = json.loads((tmp_path / "eval" / "report_seed0.json").read_text())
        assert report["report"]["acc_all"] == 1.0

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        full_args = ["train", "--seed", "4", "--out", str(tmp_path / "full"), *SMALL]
        main(full_args)
        staged = [
            "train", "--seed", "4", "--out", str(tmp_path / "staged"),
            *SMALL, "--set", "train.checkpoint_every=2",
        ]
        main(staged)
        full_tel = (tmp_path / "full" / "telemetry.jsonl").read_text()
        staged_tel = (tmp_path / "staged" / "telemetry.jsonl").read_text()
        # staged run embeds a different config (checkpoint_every); compare records
        full_records = [json.loads(l) for l in full_tel.splitlines()[1:]]
        staged_records = [json.loads(l) for l in staged_tel.splitlines()[1:]]
        assert full_records == staged_records
        assert (tmp_path / "staged" / "checkpoint_epoch0002.json").exists()

        # resuming the mid checkpoint reproduces the remaining epochs
        rc = main([
            "train", "--seed", "4", "--out", str(tmp_path / "resumed"),
            *SMALL, "--set", "train.checkpoint_every=2",
            "--resume", str(tmp_path / "staged" / "checkpoint_epoch0002.json"),
        ])
        assert rc == 0
        resumed_records = [
            json.loads(l)
            for l in (tmp_path / "resumed" / "telemetry.jsonl").read_text().splitlines()[1:]
        ]
        assert resumed_records == full_records[2:]
        assert sha(tmp_path / "resumed" / "checkpoint.json") == sha(tmp_path / "staged" / "checkpoint.json")

    def test_resume_config_mismatch_rejected(self, tmp_path, capsys):
        main(["train", "--seed", "4", "--out", str(tmp_path / "run"), *SMALL])
        rc = main([
            "train", "--seed", "4", "--out", str(tmp_path / "bad"),
            *SMALL, "--set", "train.base_lr=0.01",
            "--resume", str(tmp_path / "run" / "checkpoint.json"),
        ])
        assert rc == 2

    def test_determinism_byte_identical_outputs(self, tmp_path):
        for out in ("a", "b"):
            main(["train", "--seed", "11", "--out", str(tmp_path / out), *SMALL])
            main(["eval", "--checkpoint", str(tmp_path / out / "checkpoint.json"),
                  "--seeds", "0", "--out", str(tmp_path / out / "eval")])
        assert sha(tmp_path / "a" / "checkpoint.json") == sha(tmp_path / "b" / "checkpoint.json")
        assert sha(tmp_path / "a" / "eval" / "report_seed0.json") == \
            sha(tmp_path / "b" / "eval" / "report_seed0.json")


class TestEstimateCommand:
    def test_raw_estimate_diagnostics(self, tmp_path):
        rc = main(["estimate", "--seed", "2", "--out", str(tmp_path), *SMALL])
        assert rc == 0
        rec = json.loads((tmp_path / "estimate.json").read_text())
        assert len(rec["pi_e"]) == 5
        assert sorted(rec["cluster_to_class"]) == list(range(5))
        assert sum(rec["cluster_sizes"]) == len(rec["assignments"])

    def test_checkpoint_estimate(self, tmp_path):
        main(["train", "--seed", "6", "--out", str(tmp_path / "run"), *SMALL])
        rc = main(["estimate", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"),
                   "--seed", "0", "--out", str(tmp_path)])
        assert rc == 0
        rec = json.loads((tmp_path / "estimate.json").read_text())
        assert abs(sum(rec["pi_e"]) - 1.0) < 1e-9


class TestAblate:
    def run_axis(self, tmp_path, axis):
        args = [
            "ablate", "--axis", axis, "--seeds", "0", "--out", str(tmp_path),
            "--set", "dataset.num_classes=4", "--set", "dataset.d_in=5",
            "--set", "dataset.n_max=16", "--set", "dataset.rho_l=4",
            "--set", "dataset.rho_u=4", "--set", "dataset.num_known=2",
            "--set", "dataset.test_per_class=5",
            "--set", "train.total_epochs=3", "--set", "train.batch_size=32",
            "--set", "train.warmup_epochs=1", "--set", "train.reestimate_interval=2",
            "--set", "train.base_lr=0.05",
        ]
        rc = main(args)
        assert rc == 0
        rows = (tmp_path / f"ablate_{axis}.csv").read_text().splitlines()
        return rows

    def test_similarity_axis_has_four_rows(self, tmp_path):
        rows = self.run_axis(tmp_path, "similarity")
        assert len(rows) == 5  # header + l1, l2, cosine, dot
        assert [r.split(",")[0] for r in rows[1:]] == ["l1", "l2", "cosine", "dot"]

    def test_interval_axis_has_five_rows(self, tmp_path):
        rows = self.run_axis(tmp_path, "r")
        assert [r.split(",")[0] for r in rows[1:]] == ["r=1", "r=5", "r=10", "r=25", "r=50"]

    def test_loss_mode_axis_rows(self, tmp_path):
        rows = self.run_axis(tmp_path, "loss_mode")
        assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "hard", "soft"]

    def test_k_axis_rows(self, tmp_path):
        rows = self.run_axis(tmp_path, "k")
        assert [r.split(",")[0] for r in rows[1:]] == ["k=0.0", "k=0.25", "k=0.5", "k=1.0", "k=1.5"]

    def test_alpha_beta_axis_rows(self, tmp_path):
        rows = self.run_axis(tmp_path, "alpha_beta")
        assert [r.split(",")[0] for r in rows[1:]] == [
            "baseline", "vanilla", "debias", "sampling", "both"
        ]


def test_run_experiment_in_memory():
    cfg = small_cfg()
    report, result, built = run_experiment(cfg, seed=0)
    assert 0.0 <= report.acc_all <= 1.0
    assert result.epochs_done == 4
    assert built.test_labels.size == 5 * 8


def test_smoke_config_runs_under_a_minute(tmp_path):
    # C=6, N around 300, T=20 on one core
    import time

    args = [
        "train", "--seed", "0", "--out", str(tmp_path),
        "--set", "dataset.num_classes=6", "--set", "dataset.d_in=8",
        "--set", "dataset.n_max=90", "--set", "dataset.rho_l=10",
        "--set", "dataset.rho_u=10", "--set", "dataset.num_known=4",
        "--set", "dataset.test_per_class=20", "--set", "train.total_epochs=20",
        "--set", "train.batch_size=64", "--set", "train.warmup_epochs=2",
        "--set", "train.reestimate_interval=10",
    ]
    t0 = time.time()
    assert main(args) == 0
    assert time.time() - t0 < 60.0
