import csv
import json

import numpy as np
import pytest

from fassl.cli import main
from fassl.data import Dataset, load_dataset
from fassl.encoder import load_checkpoint
from fassl.pipeline import (ARTIFACTS, RunConfig, StageError, apply_overrides, derive_seed,
                            load_config, parse_config_text, run_pipeline, sweep)
from fassl.prototypes import ProtoStageConfig
from helpers import tiny_config


class LabelAuditDataset(Dataset):
    """Dataset that records the pipeline stage of every ``labels`` read."""

    def __init__(self, ds: Dataset):
        super().__init__(ds.samples, ds.labels, ds.per_class_counts, ds.group_of_class)
        object.__setattr__(self, "stage", "setup")
        object.__setattr__(self, "reads", [])

    def __getattribute__(self, name):
        if name == "labels":
            object.__getattribute__(self, "reads").append(object.__getattribute__(self, "stage"))
        return object.__getattribute__(self, name)


def audited_run(cfg, data):
    train, test = LabelAuditDataset(data[0]), LabelAuditDataset(data[1])
    train.reads.clear()
    test.reads.clear()

    def on_stage(name):
        object.__setattr__(train, "stage", name)
        object.__setattr__(test, "stage", name)

    run_pipeline(cfg, datasets=(train, test), on_stage=on_stage)
    return train.reads + test.reads


def test_no_label_reads_before_eval(tmp_path, tiny_data):
    reads = audited_run(tiny_config(tmp_path), tiny_data)
    assert reads, "audit saw no reads at all; the probe must read labels"
    assert not [s for s in reads if s in ("data", "proto", "rebalance")]
    assert {"eval"} <= set(reads)


def test_audit_detects_a_leak(tmp_path, tiny_data, monkeypatch):
    import fassl.pipeline as pl
    real = pl.train_prototype_stage

    def leaky(ds, *a, **kw):
        _ = tiny_leak.labels
        return real(ds, *a, **kw)

    train = LabelAuditDataset(tiny_data[0])
    tiny_leak = train
    monkeypatch.setattr(pl, "train_prototype_stage", leaky)
    run_pipeline(tiny_config(tmp_path), datasets=(train, tiny_data[1]),
                 on_stage=lambda s: object.__setattr__(train, "stage", s))
    assert "proto" in train.reads


def test_artifacts_and_determinism(tmp_path):
    a = run_pipeline(tiny_config(tmp_path / "a", seed=4))
    run_pipeline(tiny_config(tmp_path / "b", seed=4))
    for name in ARTIFACTS:
        assert (tmp_path / "a" / name).exists()
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "student.fasc").read_bytes() == (tmp_path / "b" / "student.fasc").read_bytes()
    c = run_pipeline(tiny_config(tmp_path / "c", seed=5))
    assert c["stage1"]["loss"] != a["stage1"]["loss"]
    m = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert m["acc_all"] == pytest.approx((m["acc_frequent"] + m["acc_medium"] + m["acc_rare"]) / 3)
    assert len(m["stage1"]["loss"]) == 2 and len(m["stage2"]["loss"]) == 2
    assert min(m["stage2"]["feature_std"]) > 1e-6
    assert m["ablation"] == "none"
    pct = m["prototypes"]["group_percent"]
    assert sum(pct.values()) == pytest.approx(100.0)


def test_config_snapshot_written_before_training(tmp_path):
    cfg = tiny_config(tmp_path, proto=ProtoStageConfig(num_prototypes=16, epochs=2, batch_size=32, lr=float("nan")))
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg)
    assert exc.value.stage == "proto"
    assert (tmp_path / "config.txt").exists()
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["error"]["stage"] == "proto"


def test_stage2_runs_from_persisted_checkpoints(tmp_path, monkeypatch):
    import fassl.pipeline as pl
    seen = {}
    real = pl.train_rebalance_stage

    def spy(ds, cfg, teacher, bank, **kw):
        seen["teacher"], seen["bank"] = teacher, bank
        return real(ds, cfg, teacher, bank, **kw)

    monkeypatch.setattr(pl, "train_rebalance_stage", spy)
    run_pipeline(tiny_config(tmp_path))
    assert seen["teacher"].equal(load_checkpoint(tmp_path / "teacher_stage1.fasc"))
    assert np.array_equal(seen["bank"].P, load_checkpoint(tmp_path / "prototypes.fasc")["P"])


def test_ablation_flag(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg = apply_overrides(cfg, {"rebalance.uniform_weights": "true"})
    m = run_pipeline(cfg)
    assert m["ablation"] == "uniform-weights"
    assert m["stage2"]["uniform_weights"] is True
    assert m["stage2"]["weight_histogram"]["bound"] == 1.0


def test_config_parsing_and_overrides(tmp_path):
    text = "# comment\nseed = 3\nproto.num_prototypes = 64  # K\nrebalance.tau=0.5\nrebalance.uniform_weights = yes\n"
    assert parse_config_text(text)["proto.num_prototypes"] == "64"
    (tmp_path / "c.txt").write_text(text)
    cfg = load_config(tmp_path / "c.txt")
    assert (cfg.seed, cfg.proto.num_prototypes, cfg.rebalance.tau, cfg.rebalance.uniform_weights) == (3, 64, 0.5, True)
    with pytest.raises(KeyError):
        apply_overrides(cfg, {"proto.nope": "1"})
    with pytest.raises(KeyError):
        apply_overrides(cfg, {"bogus.k": "1"})
    with pytest.raises(ValueError):
        parse_config_text("no equals sign")
    with pytest.raises(ValueError):
        apply_overrides(cfg, {"rebalance.tau": "2"})


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, "proto") == derive_seed(0, "proto")
    assert len({derive_seed(0, t) for t in ("data", "proto", "rebalance", "eval")}) == 4
    assert derive_seed(0, "proto") != derive_seed(1, "proto")


def test_sweep_shape(tmp_path):
    table = sweep(tiny_config(tmp_path), "K", [8, 16, 32], seeds=(0, 1), out=str(tmp_path))
    assert [r["K"] for r in table] == [8, 16, 32]
    assert all(r["n_runs"] == 2 and r["n_failed"] == 0 for r in table)
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and "acc_all" in rows[0] and "proto_frequent" in rows[0]
    with open(tmp_path / "runs.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 6
    with pytest.raises(ValueError):
        sweep(tiny_config(tmp_path), "depth", [1])


def test_sweep_records_failures(tmp_path, monkeypatch):
    import fassl.pipeline as pl
    real = pl.run_pipeline

    def flaky(cfg, *a, **kw):
        if cfg.rebalance.tau == 0.5:
            raise StageError("rebalance", RuntimeError("boom"))
        return real(cfg, *a, **kw)

    monkeypatch.setattr(pl, "run_pipeline", flaky)
    table = sweep(tiny_config(tmp_path), "tau", ["0.5", "0.9"], seeds=(0, 1), out=str(tmp_path))
    assert (table[0]["n_runs"], table[0]["n_failed"]) == (0, 2)
    assert (table[1]["n_runs"], table[1]["n_failed"]) == (2, 0)
    with open(tmp_path / "runs.csv") as fh:
        errors = [r["error"] for r in csv.DictReader(fh)]
    assert sum("boom" in e for e in errors) == 2
    with pytest.raises(ValueError):
        sweep(tiny_config(tmp_path), "tau", ["nan"])


def test_stage2_rerun_from_checkpoints_is_exact(tmp_path):
    from fassl.encoder import save_checkpoint
    from fassl.pipeline import resolve_seeds, run_stage2_from_files
    cfg = tiny_config(tmp_path)
    run_pipeline(cfg)
    original = (tmp_path / "student.fasc").read_bytes()
    (tmp_path / "student.fasc").unlink()
    (tmp_path / "teacher.fasc").unlink()
    rcfg = resolve_seeds(cfg)
    train, _ = pl_data(rcfg)
    student, _, _ = run_stage2_from_files(rcfg, train.unlabeled(), tmp_path, rcfg.encoder.config(8))
    save_checkpoint(student, tmp_path / "student.fasc")
    assert (tmp_path / "student.fasc").read_bytes() == original


def pl_data(cfg):
    from fassl.pipeline import load_or_make_data
    return load_or_make_data(cfg)


def test_default_config_on_tiny_spec(tmp_path):
    cfg = apply_overrides(RunConfig(out=str(tmp_path)), {"data.num_classes": "6", "data.max_count": "60"})
    assert cfg.data.imbalance_factor == 100 and cfg.data.input_dim == 16
    run_pipeline(cfg)
    assert all((tmp_path / name).exists() for name in ARTIFACTS)
    timing = json.loads((tmp_path / "timing.json").read_text())
    assert timing["total"] < 300


def test_eval_config_validates():
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"eval.fraction": "0"})


def test_cli_stagewise_roundtrip(tmp_path, capsys):
    d = tmp_path
    assert main(["synth-data", "--classes", "6", "--max-count", "60", "--rho", "10", "--dim", "8",
                 "--test-per-class", "10", "--out", str(d / "train.fasl")]) == 0
    assert load_dataset(d / "train.fasl.test").num_samples == 60
    assert main(["pretrain-proto", "--data", str(d / "train.fasl"), "--k", "16", "--epochs", "2",
                 "--feature-dim", "8", "--out-teacher", str(d / "t1.fasc"), "--out-protos", str(d / "p.fasc")]) == 0
    m1 = json.loads((d / "t1.fasc.metrics.json").read_text())
    assert len(m1["loss"]) == 2 and m1["seed"] == 0 and m1["config"]["num_prototypes"] == 16
    assert main(["pretrain-rebalance", "--data", str(d / "train.fasl"), "--teacher", str(d / "t1.fasc"),
                 "--protos", str(d / "p.fasc"), "--epochs", "2", "--out-student", str(d / "s.fasc"),
                 "--out-teacher", str(d / "t2.fasc")]) == 0
    m2 = json.loads((d / "s.fasc.metrics.json").read_text())
    assert len(m2["weight_histogram"]["counts"]) == 16
    assert main(["eval-linear", "--features-from", str(d / "s.fasc"), "--data", str(d / "train.fasl"),
                 "--test-data", str(d / "train.fasl.test"), "--out", str(d / "eval.json")]) == 0
    ev = json.loads((d / "eval.json").read_text())
    assert {"acc_all", "acc_frequent", "acc_medium", "acc_rare", "std_groups", "config", "seed"} <= set(ev)
    assert main(["analyze-prototypes", "--protos", str(d / "p.fasc"), "--teacher", str(d / "t1.fasc"),
                 "--data", str(d / "train.fasl"), "--out", str(d / "an.json")]) == 0
    an = json.loads((d / "an.json").read_text())
    assert sum(an["class_counts"]) + an["unassigned"] == 16


def test_cli_pipeline_and_sweep(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.num_classes = 6\ndata.max_count = 60\ndata.input_dim = 8\nproto.epochs = 1\n"
                   "proto.num_prototypes = 16\nrebalance.epochs = 1\neval.test_per_class = 10\n")
    assert main(["run-pipeline", "--config", str(cfg), "--out", str(tmp_path / "r"),
                 "--ablation", "uniform-weights", "--set", "seed=2"]) == 0
    m = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert m["ablation"] == "uniform-weights" and m["seed"] == 2
    assert "proto.num_prototypes = 16" in (tmp_path / "r" / "config.txt").read_text()
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--axis", "tau",
                 "--values", "0,1", "--seeds", "0,1"]) == 0
    assert "tau" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        main(["sweep", "--axis", "depth", "--values", "1"])
