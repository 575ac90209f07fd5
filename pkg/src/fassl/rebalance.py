"""Stage 2: prototype-guided re-balanced teacher-student training.

Each sample's consistency loss is weighted by how dissimilar its teacher
feature is to the prototype bank learned in stage 1. The student is trained
by SGD; the teacher follows it by exponential moving average.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tape
from .data import AugmentConfig, augment_batch
from .encoder import (SGD, EncoderConfig, InvalidConfigError, ParamSet, add_head, ema_update,
                      encode, mlp_on_tape, register)
from .prototypes import DivergenceMonitor, PrototypeBank

log = logging.getLogger(__name__)

EXP_CLAMP = 700.0
COLLAPSE_STD = 1e-6
HIST_BINS = 16


class ContractError(ValueError):
    pass


class CollapseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RebalanceConfig:
    tau: float = 0.99
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    clip_quantile: float = 0.95
    uniform_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidConfigError("tau must lie in [0, 1]")
        if not 0.5 < self.clip_quantile <= 1.0:
            raise InvalidConfigError("clip_quantile must lie in (0.5, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise InvalidConfigError("batch_size >= 1, epochs >= 0 and lr >= 0 required")


def rarity_log_weight(z: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, int]:
    """``-sum_k <z, p_k>`` (clamped to +-700) and the number of clamped entries."""
    s = np.asarray(z, dtype=np.float64) @ np.asarray(P, dtype=np.float64).sum(axis=0)
    clamped = np.abs(s) > EXP_CLAMP
    return -np.clip(s, -EXP_CLAMP, EXP_CLAMP), int(np.count_nonzero(clamped))


def rarity_weight(z: np.ndarray, P) -> np.ndarray:
    """``1 / exp(sum_k <z, p_k>)`` for one feature or a batch of features."""
    P = P.P if isinstance(P, PrototypeBank) else P
    logw, _ = rarity_log_weight(z, P)
    return np.exp(logw)


def clip_normalize_weights(weights, q: float) -> np.ndarray:
    """Clip at the batch's q-quantile, then rescale to mean exactly 1."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ContractError("weights must be a nonempty 1-D array")
    if np.any(~(w > 0)):
        raise ContractError("weights must be strictly positive")
    clipped = np.minimum(w, np.quantile(w, q))
    return clipped / clipped.mean()


def consistency_loss(z_student: np.ndarray, z_teacher: np.ndarray) -> float:
    """Squared distance between the L2-normalized vectors (``2 - 2 cos``)."""
    a = np.asarray(z_student, dtype=np.float64)
    b = np.asarray(z_teacher, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise NumericError(-1, "consistency_loss", "zero-norm input")
    d = a / na - b / nb
    return float(d @ d)


def batch_weights(z_teacher: np.ndarray, P: np.ndarray, cfg: RebalanceConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-sample loss weights, plus the raw rarity weights and overflow count."""
    logw, overflow = rarity_log_weight(z_teacher, P)
    raw = np.exp(logw)
    if cfg.uniform_weights:
        return np.ones(len(raw)), raw, overflow
    return clip_normalize_weights(raw, cfg.clip_quantile), raw, overflow


def build_rebalance_tape(student: ParamSet, student_view: np.ndarray, z_teacher: np.ndarray,
                         weights: np.ndarray):
    """Tape for L_reb. Teacher features and weights enter as constants."""
    tape = Tape()
    w = register(tape, student)
    z = mlp_on_tape(tape, w, "enc", tape.constant(student_view, name="x"))
    zt = mlp_on_tape(tape, w, "head", z)
    target = tape.l2_normalize(tape.constant(z_teacher, name="z_teacher"))
    per_sample = tape.squared_distance(tape.l2_normalize(zt), target)
    weighted = tape.inner_product(tape.constant(weights, name="weights"), per_sample)
    loss = tape.scalar_mul(weighted, 1.0 / len(weights))
    return tape, z, loss


def rebalanced_loss(student: ParamSet, teacher: ParamSet, bank, student_view, teacher_view,
                    cfg: RebalanceConfig | None = None) -> float:
    cfg = cfg or RebalanceConfig()
    P = bank.P if isinstance(bank, PrototypeBank) else bank
    zt = encode(teacher, teacher_view)
    weights, _, _ = batch_weights(zt, P, cfg)
    _, _, loss = build_rebalance_tape(student, student_view, zt, weights)
    return float(loss.value)


def init_student(teacher: ParamSet, enc_cfg: EncoderConfig, seed) -> ParamSet:
    """Student = copy of the teacher encoder plus a fresh projection head."""
    return add_head(teacher, enc_cfg, seed)


def head_dims_for(teacher: ParamSet, hidden: int = 64) -> EncoderConfig:
    i = 0
    while f"enc.{i + 1}.W" in teacher:
        i += 1
    D = teacher[f"enc.{i}.W"].shape[0]
    dims = [teacher["enc.0.W"].shape[1]] + [teacher[f"enc.{j}.W"].shape[0] for j in range(i + 1)]
    return EncoderConfig(tuple(dims), (D, hidden, D))


def train_rebalance_stage(ds, cfg: RebalanceConfig, teacher: ParamSet, bank: PrototypeBank,
                          student_init: ParamSet | None = None,
                          augment: AugmentConfig | None = None,
                          enc_cfg: EncoderConfig | None = None):
    """Returns ``(student, teacher, metrics)``; the bank is never modified."""
    X = np.asarray(ds.samples, dtype=np.float64)
    augment = augment or AugmentConfig()
    rng = np.random.default_rng(cfg.seed)
    head_seed = int(rng.integers(0, 2**63 - 1))
    teacher = teacher.subset("enc.")
    P = bank.P.copy()
    P.setflags(write=False)
    if student_init is None:
        student = init_student(teacher, enc_cfg or head_dims_for(teacher), head_seed)
    else:
        student = student_init.copy()
    opt = SGD(cfg.lr, cfg.momentum)

    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    epoch_loss, feat_std, w_mean, w_max = [], [], [], []
    all_weights, all_stds = [], []
    overflow = 0
    collapse_run = 0
    collapse_warned = False
    monitor = DivergenceMonitor("stage 2")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, stds, means, maxes = [], [], [], []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xs = augment_batch(X[idx], augment, rng)
            xt = augment_batch(X[idx], augment, rng)
            zt = encode(teacher, xt)
            weights, _, ov = batch_weights(zt, P, cfg)
            overflow += ov
            try:
                tape, z_student, loss = build_rebalance_tape(student, xs, zt, weights)
            except NumericError as exc:
                raise NumericError(exc.node_id, exc.op, f"epoch {epoch} batch {start // bs}: {exc}") from None
            grads = tape.backward(loss)
            opt.step(student, grads)
            teacher = ema_update(teacher, student, cfg.tau)

            losses.append(float(loss.value))
            zn = z_student.value / np.maximum(np.linalg.norm(z_student.value, axis=1, keepdims=True), 1e-12)
            stds.append(float(zn.std(axis=0).mean()) if len(idx) > 1 else float("nan"))
            means.append(float(weights.mean()))
            maxes.append(float(weights.max()))
            all_weights.append(weights)
        all_stds.extend(v for v in stds if not np.isnan(v))
        epoch_loss.append(float(np.mean(losses)))
        feat_std.append(float(np.nanmean(stds)) if not all(np.isnan(stds)) else float("nan"))
        w_mean.append(float(np.mean(means)))
        w_max.append(float(np.max(maxes)))
        if feat_std[-1] < COLLAPSE_STD:
            collapse_run += 1
            if collapse_run >= 3 and not collapse_warned:
                log.warning("feature std below %g for 3 epochs: representation collapse", COLLAPSE_STD)
                collapse_warned = True
        else:
            collapse_run = 0
        monitor.update(epoch, epoch_loss[-1])

    weights_flat = np.concatenate(all_weights) if all_weights else np.ones(1)
    bound = float(weights_flat.max())
    hist, _ = np.histogram(weights_flat, bins=HIST_BINS, range=(0.0, bound))
    metrics = {
        "loss": epoch_loss,
        "feature_std": feat_std,
        "feature_std_min": float(min(all_stds)) if all_stds else float("nan"),
        "weight_mean": w_mean,
        "weight_max": w_max,
        "overflow_count": overflow,
        "collapse_warning": collapse_warned,
        "weight_histogram": {"bound": bound, "counts": hist.tolist()},
        "uniform_weights": cfg.uniform_weights,
    }
    return student, teacher, metrics
