"""End-to-end orchestration, config files and parameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import AugmentConfig, DatasetSpec, load_dataset, synth_gaussian_mixture
from .encoder import EncoderConfig, init_params, load_checkpoint, save_checkpoint
from .evaluation import (evaluate_probe, export_embeddings, extract_features,
                         prototype_class_distribution)
from .prototypes import PrototypeBank, ProtoStageConfig, train_prototype_stage
from .rebalance import RebalanceConfig, train_rebalance_stage

log = logging.getLogger(__name__)

ARTIFACTS = (
    "config.txt",
    "teacher_stage1.fasc",
    "prototypes.fasc",
    "student.fasc",
    "teacher.fasc",
    "metrics.json",
)

SWEEP_AXES = {
    "K": ("proto", "num_prototypes", int),
    "tau": ("rebalance", "tau", float),
    "rho": ("data", "imbalance_factor", float),
    "fraction": ("eval", "fraction", float),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class EvalConfig:
    fraction: float = 1.0
    epochs: int = 0  # 0 = 30 for the full label set, 100 for few-shot
    lr: float = 1.0
    test_per_class: int = 100

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("eval.fraction must lie in (0, 1]")
        if self.epochs < 0 or self.lr < 0 or self.test_per_class < 0:
            raise ValueError("eval.epochs, eval.lr and eval.test_per_class must be non-negative")

    @property
    def resolved_epochs(self) -> int:
        if self.epochs > 0:
            return self.epochs
        return 30 if self.fraction >= 1.0 else 100


@dataclass(frozen=True)
class EncoderDims:
    hidden: int = 64
    feature_dim: int = 32
    head_hidden: int = 64

    def config(self, input_dim: int) -> EncoderConfig:
        D = self.feature_dim
        return EncoderConfig((input_dim, self.hidden, D), (D, self.head_hidden, D))


@dataclass(frozen=True)
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderDims = field(default_factory=EncoderDims)
    proto: ProtoStageConfig = field(default_factory=ProtoStageConfig)
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs/default"
    data_path: str = ""
    test_path: str = ""
    init_teacher: str = ""
    alternate_rounds: int = 0

    @property
    def ablation(self) -> str:
        return "uniform-weights" if self.rebalance.uniform_weights else "none"


# -- config files ---------------------------------------------------------

_SECTIONS = ("data", "augment", "encoder", "proto", "rebalance", "eval")


def _parse_value(text: str, typ):
    text = text.strip()
    if typ is bool or typ == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ in (int, "int"):
        return int(float(text)) if "e" in text.lower() else int(text)
    if typ in (float, "float"):
        return float(text)
    return text


def _field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints.get(f.type, f.type) if isinstance(f.type, str) else f.type for f in fields(cls)}


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``section.key = value`` (or top-level ``key = value``) strings."""
    sections = {s: getattr(cfg, s) for s in _SECTIONS}
    top = {}
    for key, raw in overrides.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise KeyError(f"unknown config section {sec!r}")
            types = _field_types(type(sections[sec]))
            if name not in types:
                raise KeyError(f"unknown config key {key!r}")
            sections[sec] = replace(sections[sec], **{name: _parse_value(str(raw), types[name])})
        else:
            types = _field_types(RunConfig)
            if key not in types or key in _SECTIONS:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = _parse_value(str(raw), types[key])
    return replace(cfg, **sections, **top)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return apply_overrides(base or RunConfig(), parse_config_text(Path(path).read_text()))


def config_items(cfg: RunConfig) -> list[tuple[str, object]]:
    items = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            items.extend((f"{f.name}.{g.name}", getattr(value, g.name)) for g in fields(value))
        else:
            items.append((f.name, value))
    return items


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg))


# -- running --------------------------------------------------------------


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-stage seed derived from the global seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1, np.uint64)[0] >> 1)


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def resolve_seeds(cfg: RunConfig) -> RunConfig:
    """Stage seeds derived from the global seed."""
    return replace(
        cfg,
        data=replace(cfg.data, seed=derive_seed(cfg.seed, "data")),
        proto=replace(cfg.proto, seed=derive_seed(cfg.seed, "proto")),
        rebalance=replace(cfg.rebalance, seed=derive_seed(cfg.seed, "rebalance")),
    )


def load_or_make_data(cfg: RunConfig):
    if cfg.data_path:
        train = load_dataset(cfg.data_path)
        test = load_dataset(cfg.test_path) if cfg.test_path else train
        return train, test
    return synth_gaussian_mixture(cfg.data, test_per_class=cfg.eval.test_per_class)


def run_pipeline(cfg: RunConfig, datasets=None, on_stage: Callable[[str], None] | None = None) -> dict:
    """Data -> stage 1 -> stage 2 -> probe -> prototype analysis, in that order.

    Writes every artifact in :data:`ARTIFACTS` (plus ``timing.json`` and
    ``embeddings.csv``) into ``cfg.out`` and returns the metrics dict.
    """
    cfg = resolve_seeds(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    # output path left out of the echo so identical runs give identical files
    echo = {k: v for k, v in config_items(cfg) if k != "out"}
    metrics: dict = {"seed": cfg.seed, "ablation": cfg.ablation, "config": echo}
    timing: dict[str, float] = {}
    stage = "data"

    def enter(name):
        nonlocal stage
        stage = name
        if on_stage is not None:
            on_stage(name)
        timing[name] = time.perf_counter()

    try:
        enter("data")
        train, test = datasets if datasets is not None else load_or_make_data(cfg)
        unlabeled = train.unlabeled()
        enc_cfg = cfg.encoder.config(unlabeled.samples.shape[1])

        enter("proto")
        teacher_init = load_checkpoint(cfg.init_teacher) if cfg.init_teacher else init_params(
            enc_cfg, derive_seed(cfg.seed, "teacher-init"))
        proto_cfg = replace(cfg.proto, init_mode="checkpoint" if cfg.init_teacher else "random")
        if cfg.alternate_rounds > 0:
            student, teacher, bank, s1, s2 = _alternate(cfg, unlabeled, teacher_init, enc_cfg, out)
        else:
            teacher1, bank, s1 = train_prototype_stage(unlabeled, proto_cfg, teacher_init,
                                                       enc_cfg=enc_cfg, augment=cfg.augment)
            save_checkpoint(teacher1, out / "teacher_stage1.fasc")
            save_checkpoint(bank.to_params(), out / "prototypes.fasc")

            enter("rebalance")
            student, teacher, s2 = run_stage2_from_files(cfg, unlabeled, out, enc_cfg)
        metrics["stage1"] = s1
        metrics["stage2"] = s2
        save_checkpoint(student, out / "student.fasc")
        save_checkpoint(teacher, out / "teacher.fasc")

        enter("eval")
        student_eval = load_checkpoint(out / "student.fasc")
        gm = evaluate_probe(student_eval, train, test, fraction=cfg.eval.fraction,
                            epochs=cfg.eval.resolved_epochs, lr=cfg.eval.lr,
                            seed=derive_seed(cfg.seed, "eval"))
        metrics["eval"] = gm.as_dict()
        metrics.update(gm.as_dict())

        enter("analysis")
        teacher1 = load_checkpoint(out / "teacher_stage1.fasc")
        bank = PrototypeBank.from_params(load_checkpoint(out / "prototypes.fasc"))
        feats = extract_features(teacher1, train.samples)
        metrics["prototypes"] = prototype_class_distribution(
            bank, feats, train.labels, train.group_of_class).as_dict()
        export_embeddings(extract_features(student_eval, test.samples), test.labels, out / "embeddings.csv")
    except Exception as exc:
        metrics["error"] = {"stage": stage, "message": str(exc)}
        write_json(metrics, out / "metrics.json")
        raise StageError(stage, exc) from exc
    finally:
        end = time.perf_counter()
        names = list(timing)
        spans = {n: (timing[names[i + 1]] if i + 1 < len(names) else end) - timing[n] for i, n in enumerate(names)}
        write_json({"seconds": spans, "total": sum(spans.values())}, out / "timing.json")
    write_json(metrics, out / "metrics.json")
    return metrics


def run_stage2_from_files(cfg: RunConfig, unlabeled, out: Path, enc_cfg: EncoderConfig):
    """Stage 2 from the persisted stage-1 teacher and prototype checkpoints."""
    teacher1 = load_checkpoint(out / "teacher_stage1.fasc")
    bank = PrototypeBank.from_params(load_checkpoint(out / "prototypes.fasc"))
    return train_rebalance_stage(unlabeled, cfg.rebalance, teacher1, bank,
                                 augment=cfg.augment, enc_cfg=enc_cfg)


def _alternate(cfg: RunConfig, unlabeled, teacher, enc_cfg, out: Path):
    """Ablation only: interleave the two stages for ``alternate_rounds`` rounds."""
    rounds = cfg.alternate_rounds
    e1 = max(1, cfg.proto.epochs // rounds)
    e2 = max(1, cfg.rebalance.epochs // rounds)
    bank = student = None
    s1 = {"loss": [], "skipped_batches": 0}
    s2: dict = {"loss": [], "feature_std": []}
    for r in range(rounds):
        pc = replace(cfg.proto, epochs=e1, seed=derive_seed(cfg.proto.seed, f"round{r}"))
        teacher, bank, m1 = train_prototype_stage(unlabeled, pc, teacher, enc_cfg=enc_cfg,
                                                  augment=cfg.augment, bank_init=bank)
        if r == 0:
            save_checkpoint(teacher, out / "teacher_stage1.fasc")
        rc = replace(cfg.rebalance, epochs=e2, seed=derive_seed(cfg.rebalance.seed, f"round{r}"))
        student, teacher, m2 = train_rebalance_stage(unlabeled, rc, teacher, bank, student_init=student,
                                                     augment=cfg.augment, enc_cfg=enc_cfg)
        s1["loss"] += m1["loss"]
        s1["skipped_batches"] += m1["skipped_batches"]
        s2["loss"] += m2["loss"]
        s2["feature_std"] += m2["feature_std"]
    save_checkpoint(teacher, out / "teacher_stage1.fasc")
    save_checkpoint(bank.to_params(), out / "prototypes.fasc")
    s2["alternate_rounds"] = rounds
    return student, teacher, bank, s1, s2


# -- sweeps ---------------------------------------------------------------

SWEEP_COLUMNS = ("acc_all", "acc_overall", "acc_frequent", "acc_medium", "acc_rare", "std_groups",
                 "proto_frequent", "proto_medium", "proto_rare")


def _with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    section, key, typ = SWEEP_AXES[axis]
    v = typ(value)
    if isinstance(v, float) and not math.isfinite(v):
        raise ValueError(f"sweep value {value!r} is not finite")
    return replace(cfg, **{section: replace(getattr(cfg, section), **{key: v})})


def _run_one(args):
    cfg, axis, value, seed = args
    try:
        m = run_pipeline(cfg)
    except Exception as exc:  # recorded, sweep continues
        return {"axis": axis, "value": value, "seed": seed, "error": str(exc)}
    row = {"axis": axis, "value": value, "seed": seed, "error": ""}
    row.update({k: m[k] for k in SWEEP_COLUMNS[:6]})
    pct = m["prototypes"]["group_percent"]
    row.update(proto_frequent=pct["Frequent"], proto_medium=pct["Medium"], proto_rare=pct["Rare"])
    return row


def sweep(cfg: RunConfig, axis: str, values, seeds=(0,), out: str | None = None,
          workers: int | None = None) -> list[dict]:
    """One pipeline run per (value, seed); the same seeds are used for every value.

    Writes ``runs.csv`` (one row per run) and ``sweep.csv`` (one row per value,
    seed-averaged) into ``out`` and returns the per-value rows.
    """
    root = Path(out or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for value in values:
        for seed in seeds:
            run_cfg = replace(_with_axis(cfg, axis, value), seed=int(seed),
                              out=str(root / f"{axis}={value}" / f"seed={seed}"))
            jobs.append((run_cfg, axis, value, int(seed)))
    workers = workers or int(os.environ.get("FASSL_THREADS", "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]

    table = []
    for value in values:
        ok = [r for r in runs if r["value"] == value and not r["error"]]
        row = {axis: value, "n_runs": len(ok),
               "n_failed": sum(1 for r in runs if r["value"] == value and r["error"])}
        for col in SWEEP_COLUMNS:
            row[col] = float(np.mean([r[col] for r in ok])) if ok else float("nan")
        table.append(row)
    _write_csv(root / "runs.csv", runs, ["axis", "value", "seed", *SWEEP_COLUMNS, "error"])
    _write_csv(root / "sweep.csv", table, [axis, "n_runs", "n_failed", *SWEEP_COLUMNS])
    return table


def _write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})
