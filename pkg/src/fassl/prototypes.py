"""Stage 1: frequency-aware prototype learning.

The teacher encoder and a bank of K prototypes are trained jointly with an
NT-Xent loss computed on prototype similarity scores ``h = P z`` rather than
on the features themselves.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tape, Var
from .data import AugmentConfig, augment_batch
from .encoder import SGD, EncoderConfig, InvalidConfigError, ParamSet, init_params, mlp_on_tape, register

log = logging.getLogger(__name__)

PROTO_KEY = "P"


class DivergenceError(RuntimeError):
    pass


class DivergenceMonitor:
    """Flags a run whose epoch loss exceeds ``factor`` x the first epoch's
    loss for ``patience`` consecutive epochs."""

    def __init__(self, stage: str, factor: float = 10.0, patience: int = 3):
        self.stage, self.factor, self.patience = stage, factor, patience
        self.initial: float | None = None
        self.run = 0

    def update(self, epoch: int, loss: float) -> None:
        if not math.isfinite(loss):
            return
        if self.initial is None:
            self.initial = loss
            return
        if self.initial > 0 and loss > self.factor * self.initial:
            self.run += 1
            if self.run >= self.patience:
                raise DivergenceError(f"{self.stage} diverged at epoch {epoch}: loss {loss:.4g}")
        else:
            self.run = 0


@dataclass
class PrototypeBank:
    P: np.ndarray

    def __post_init__(self):
        self.P = np.array(self.P, dtype=np.float64)
        if self.P.ndim != 2 or self.P.shape[0] < 1:
            raise InvalidConfigError(f"prototype bank must be K x D, got {self.P.shape}")
        if not np.all(np.isfinite(self.P)):
            raise InvalidConfigError("prototype bank has non-finite entries")

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @property
    def D(self) -> int:
        return self.P.shape[1]

    def to_params(self) -> ParamSet:
        return ParamSet({PROTO_KEY: self.P})

    @classmethod
    def from_params(cls, params: ParamSet) -> "PrototypeBank":
        return cls(params[PROTO_KEY])


@dataclass(frozen=True)
class ProtoStageConfig:
    num_prototypes: int = 128
    beta: float = 0.2
    batch_size: int = 64
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    init_mode: str = "random"

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise InvalidConfigError("beta must be finite and positive")
        if self.batch_size < 2:
            raise InvalidConfigError("batch_size must be >= 2 so negatives exist")
        if self.num_prototypes < 2:
            raise InvalidConfigError("need at least 2 prototypes")
        if self.epochs < 0 or self.lr < 0:
            raise InvalidConfigError("epochs and lr must be non-negative")
        if self.init_mode not in ("random", "checkpoint"):
            raise InvalidConfigError(f"unknown init_mode {self.init_mode!r}")


def init_prototypes(K: int, D: int, seed) -> PrototypeBank:
    """Entries drawn from N(0, 1/D)."""
    if K < 2:
        raise InvalidConfigError("need at least 2 prototypes")
    if D < 1:
        raise InvalidConfigError("prototype dim must be positive")
    rng = np.random.default_rng(seed)
    return PrototypeBank(rng.normal(0.0, 1.0 / np.sqrt(D), size=(K, D)))


def similarity_scores(P: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``h = P z`` for one feature vector, or row-wise for a batch."""
    P = np.asarray(P, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != P.shape[1]:
        raise ValueError(f"feature dim {z.shape[-1]} != prototype dim {P.shape[1]}")
    return P @ z if z.ndim == 1 else z @ P.T


def pair_structure(n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    """Permutation matrix sending each row to its paired view, and the
    off-diagonal mask, for rows ordered ``(h1, h1', h2, h2', ...)``."""
    partner = np.arange(n_rows) ^ 1
    perm = np.zeros((n_rows, n_rows))
    perm[np.arange(n_rows), partner] = 1.0
    return perm, ~np.eye(n_rows, dtype=bool)


def contrastive_loss_on_tape(tape: Tape, H: Var, beta: float) -> Var:
    n = H.value.shape[0]
    if n < 4 or n % 2:
        raise ValueError("need an even number (>= 4) of score rows")
    perm, off_diag = pair_structure(n)
    Hn = tape.l2_normalize(H)
    sims = tape.matmul(Hn, Hn, transpose_b=True)
    lse = tape.logsumexp(tape.scalar_mul(sims, 1.0 / beta), mask=off_diag)
    pos = tape.cosine_similarity(H, tape.matmul(tape.constant(perm), H))
    per_anchor = tape.add(lse, tape.scalar_mul(pos, -1.0 / beta))
    return tape.scalar_mul(tape.sum(per_anchor), 1.0 / n)


def contrastive_loss(H: np.ndarray, beta: float) -> float:
    """Mean NT-Xent over all 2B anchors; rows are ``(h1, h1', ..., hB, hB')``.

    The denominator runs over all other 2B-1 rows (positive included, self
    excluded); similarity is cosine on the raw score vectors.
    """
    H = np.asarray(H, dtype=np.float64)
    if np.any(np.linalg.norm(H, axis=1) < 1e-12):
        raise NumericError(-1, "contrastive_loss", "zero-norm score row")
    tape = Tape()
    return float(contrastive_loss_on_tape(tape, tape.constant(H), beta).value)


def interleave(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((2 * a.shape[0], a.shape[1]), dtype=np.float64)
    out[0::2] = a
    out[1::2] = b
    return out


def build_proto_tape(teacher: ParamSet, bank: PrototypeBank, views: np.ndarray, beta: float):
    """Tape for L_contra on interleaved views; returns ``(tape, scores, loss)``."""
    tape = Tape()
    w = register(tape, teacher, "enc.")
    P = tape.param(PROTO_KEY, bank.P)
    z = mlp_on_tape(tape, w, "enc", tape.constant(views, name="x"))
    H = tape.matmul(z, P, transpose_b=True)
    if np.any(np.linalg.norm(H.value, axis=1) < 1e-12):
        return tape, H, None
    return tape, H, contrastive_loss_on_tape(tape, H, beta)


def _samples(ds) -> np.ndarray:
    return np.asarray(ds.samples if hasattr(ds, "samples") else ds, dtype=np.float64)


def train_prototype_stage(ds, cfg: ProtoStageConfig, teacher_init: ParamSet | None = None,
                          enc_cfg: EncoderConfig | None = None,
                          augment: AugmentConfig | None = None,
                          bank_init: PrototypeBank | None = None):
    """Jointly train the teacher encoder and prototype bank.

    ``ds`` only needs a ``samples`` attribute (pass ``Dataset.unlabeled()``).
    Returns ``(teacher, bank, metrics)``.
    """
    X = _samples(ds)
    augment = augment or AugmentConfig()
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**63 - 1, size=2)
    if teacher_init is None:
        if cfg.init_mode == "checkpoint":
            raise InvalidConfigError("init_mode 'checkpoint' needs a teacher_init")
        enc_cfg = enc_cfg or EncoderConfig.default(X.shape[1])
        teacher_init = init_params(enc_cfg, int(seeds[0]))
    teacher = teacher_init.subset("enc.")
    D = encode_dim(teacher)
    bank = PrototypeBank(bank_init.P.copy()) if bank_init is not None else init_prototypes(cfg.num_prototypes, D, int(seeds[1]))

    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    epoch_loss: list[float] = []
    skipped = 0
    monitor = DivergenceMonitor("stage 1")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            v1 = augment_batch(X[idx], augment, rng)
            v2 = augment_batch(X[idx], augment, rng)
            try:
                tape, _, loss = build_proto_tape(teacher, bank, interleave(v1, v2), cfg.beta)
            except NumericError as exc:
                raise NumericError(exc.node_id, exc.op, f"epoch {epoch} batch {start // bs}: {exc}") from None
            if loss is None:
                skipped += 1
                continue
            grads = tape.backward(loss)
            opt.step(teacher, {k: v for k, v in grads.items() if k != PROTO_KEY})
            _step_bank(opt, bank, grads[PROTO_KEY])
            losses.append(float(loss.value))
        epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        monitor.update(epoch, epoch_loss[-1])
        log.debug("stage1 epoch %d loss %.5f", epoch, epoch_loss[-1])
    metrics = {"loss": epoch_loss, "skipped_batches": skipped, "num_prototypes": bank.K}
    return teacher, bank, metrics


def _step_bank(opt: SGD, bank: PrototypeBank, grad: np.ndarray) -> None:
    holder = ParamSet({PROTO_KEY: bank.P})
    opt.step(holder, {PROTO_KEY: grad})
    bank.P = holder[PROTO_KEY]


def encode_dim(params: ParamSet) -> int:
    i = 0
    while f"enc.{i + 1}.W" in params:
        i += 1
    return params[f"enc.{i}.W"].shape[0]
