"""Linear-probe evaluation, group metrics and prototype diagnostics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .autodiff import Tape
from .data import GROUPS
from .encoder import encode

log = logging.getLogger(__name__)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class GroupMetrics:
    acc_all: float
    acc_overall: float
    acc_frequent: float
    acc_medium: float
    acc_rare: float
    std_groups: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtoDistribution:
    group_percent: dict[str, float]
    class_counts: list[int]
    nearest_index: list[int]
    unassigned: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinearClassifier:
    W: np.ndarray  # C x D
    b: np.ndarray  # C

    def logits(self, F: np.ndarray) -> np.ndarray:
        return np.asarray(F, dtype=np.float64) @ self.W.T + self.b

    def predict(self, F: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(F), axis=1)


def extract_features(params, samples) -> np.ndarray:
    """Encoder features for un-augmented inputs; the projection head is unused."""
    X = samples.samples if hasattr(samples, "samples") else samples
    return encode(params, X)


def cross_entropy_tape(F: np.ndarray, onehot: np.ndarray, W: np.ndarray, b: np.ndarray):
    tape = Tape()
    Wv = tape.param("W", W)
    bv = tape.param("b", b)
    logits = tape.add(tape.matmul(tape.constant(F, name="F"), Wv, transpose_b=True), bv)
    picked = tape.inner_product(logits, tape.constant(onehot, name="onehot"))
    per_sample = tape.add(tape.logsumexp(logits), tape.scalar_mul(picked, -1.0))
    loss = tape.scalar_mul(tape.sum(per_sample), 1.0 / F.shape[0])
    return tape, loss


def linear_probe(features, labels, train_idx=None, epochs: int = 30, lr: float = 1.0,
                 seed: int = 0, num_classes: int | None = None,
                 standardize: bool = True, return_history: bool = False):
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with training-set statistics and the scaling is
    folded back into the returned weights. If a step increases the training
    loss by more than 1e-6 it is undone and the step size halved.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    C = int(num_classes if num_classes is not None else y.max() + 1)
    idx = np.arange(len(y)) if train_idx is None else np.sort(np.asarray(train_idx))
    Ftr, ytr = F[idx], y[idx]
    missing = sorted(set(range(C)) - set(ytr.tolist()))
    if missing:
        log.warning("classes %s absent from probe training set", missing)
    if standardize:
        mu = Ftr.mean(axis=0)
        sd = Ftr.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
    else:
        mu, sd = np.zeros(F.shape[1]), np.ones(F.shape[1])
    Z = (Ftr - mu) / sd
    onehot = np.eye(C)[ytr]
    W = np.zeros((C, F.shape[1]))
    b = np.zeros(C)
    tape, loss = cross_entropy_tape(Z, onehot, W, b)
    current = float(loss.value)
    history = [current]
    step = lr
    for _ in range(epochs):
        if step == 0:
            history.append(current)
            continue
        grads = tape.backward(loss)
        for _ in range(30):
            W_new, b_new = W - step * grads["W"], b - step * grads["b"]
            trial = float(tape.forward({"W": W_new, "b": b_new}))
            if trial <= current + 1e-6:
                break
            step *= 0.5
        else:
            tape.forward({"W": W, "b": b})
            break
        W, b, current = W_new, b_new, trial
        history.append(current)
    W_eff = W / sd
    clf = LinearClassifier(W_eff, b - W_eff @ mu)
    return (clf, history) if return_history else clf


def group_metrics(predictions, labels, group_of_class) -> GroupMetrics:
    """Per-group accuracy = mean of per-class accuracies inside the group."""
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    groups = np.asarray(group_of_class)
    accs = {}
    for g in GROUPS:
        classes = [c for c in np.flatnonzero(groups == g) if np.any(y == c)]
        if not classes:
            raise ContractError(f"no test samples for group {g}")
        accs[g] = 100.0 * float(np.mean([np.mean(pred[y == c] == c) for c in classes]))
    vals = np.array([accs[g] for g in GROUPS])
    return GroupMetrics(
        acc_all=float(vals.sum() / 3.0),
        acc_overall=100.0 * float(np.mean(pred == y)),
        acc_frequent=accs["Frequent"],
        acc_medium=accs["Medium"],
        acc_rare=accs["Rare"],
        std_groups=float(np.sqrt(np.mean((vals - vals.mean()) ** 2))),
    )


def few_shot_subset(labels, fraction: float, seed) -> np.ndarray:
    """Stratified subset with ``round(fraction * n_c)`` (at least 1) per class."""
    if not 0 < fraction <= 1:
        raise ContractError("fraction must lie in (0, 1]")
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        k = max(1, int(round(fraction * len(members))))
        picked.append(np.sort(rng.choice(members, size=min(k, len(members)), replace=False)))
    return np.sort(np.concatenate(picked))


def prototype_class_distribution(P, features, labels, group_of_class) -> ProtoDistribution:
    """Assign each prototype to the class of its most cosine-similar sample."""
    P = np.asarray(P.P if hasattr(P, "P") else P, dtype=np.float64)
    y = np.asarray(labels)
    C = len(group_of_class)
    nearest = kernels.nearest_cosine(P, features)
    counts = np.zeros(C, dtype=np.int64)
    per_group = dict.fromkeys(GROUPS, 0)
    unassigned = 0
    for i in nearest:
        if i < 0:
            unassigned += 1
            continue
        c = int(y[i])
        counts[c] += 1
        per_group[group_of_class[c]] += 1
    K = len(P)
    if unassigned:
        log.warning("%d prototypes have zero norm and were not assigned", unassigned)
    return ProtoDistribution(
        group_percent={g: 100.0 * per_group[g] / K for g in GROUPS},
        class_counts=counts.tolist(),
        nearest_index=[int(i) for i in nearest],
        unassigned=unassigned,
    )


def export_embeddings(features, labels, path) -> None:
    F = np.asarray(features, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(F.shape[1])] + ["label"])
        for row, label in zip(F, labels):
            writer.writerow([f"{v:.9g}" for v in row] + [int(label)])


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise ValueError("embedding CSV must end with a 'label' column")
    F = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(header) - 1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return F, y


def evaluate_probe(params, train, test, fraction: float = 1.0, epochs: int = 30,
                   lr: float = 1.0, seed: int = 0) -> GroupMetrics:
    """Probe on (a stratified fraction of) ``train`` and score on ``test``."""
    F_train = extract_features(params, train.samples)
    idx = None if fraction >= 1 else few_shot_subset(train.labels, fraction, seed)
    clf = linear_probe(F_train, train.labels, idx, epochs=epochs, lr=lr, seed=seed,
                       num_classes=train.num_classes)
    pred = clf.predict(extract_features(params, test.samples))
    return group_metrics(pred, test.labels, train.group_of_class)


def finite_metrics(m: GroupMetrics) -> bool:
    return all(math.isfinite(v) for v in asdict(m).values())
