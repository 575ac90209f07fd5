"""MLP encoders, projection head, EMA teacher update and checkpoint I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tape, Var
from .data import FormatError

CKPT_MAGIC = b"FASC"
CKPT_VERSION = 1


class InvalidConfigError(ValueError):
    pass


class ParamSet:
    """Named float arrays with fixed shapes."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        self._arrays[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._arrays:
            raise KeyError(f"unknown parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ValueError(f"{name}: shape {arr.shape} != {self._arrays[name].shape}")
        self._arrays[name] = arr.copy()

    def __contains__(self, name) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._arrays if n.startswith(prefix)]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self._arrays.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({n: a.copy() for n, a in self._arrays.items()})

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({n: a.copy() for n, a in self._arrays.items() if n.startswith(prefix)})

    def equal(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[n], other[n]) for n in self
        )

    def __repr__(self) -> str:
        return f"ParamSet({self.shapes()})"


@dataclass(frozen=True)
class EncoderConfig:
    layer_dims: tuple[int, ...] = (16, 64, 32)
    head_dims: tuple[int, ...] = (32, 64, 32)

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise InvalidConfigError("encoder needs at least input and output dims")
        if any(d < 1 for d in (*self.layer_dims, *self.head_dims)):
            raise InvalidConfigError("zero-width layer")
        if self.head_dims and (self.head_dims[0] != self.layer_dims[-1] or self.head_dims[-1] != self.layer_dims[-1]):
            raise InvalidConfigError("head must map feature dim D back to D")

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def default(cls, input_dim: int) -> "EncoderConfig":
        return cls((input_dim, 64, 32), (32, 64, 32))


def _init_mlp(dims, prefix: str, rng: np.random.Generator, params: ParamSet) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params.add(f"{prefix}.{i}.W", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        params.add(f"{prefix}.{i}.b", np.zeros(fan_out))


def init_params(cfg: EncoderConfig, seed, with_head: bool = False) -> ParamSet:
    """He-initialized encoder (``enc.*``) and optionally head (``head.*``)."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    _init_mlp(cfg.layer_dims, "enc", rng, params)
    if with_head:
        if len(cfg.head_dims) < 2:
            raise InvalidConfigError("student head needs at least two dims")
        _init_mlp(cfg.head_dims, "head", rng, params)
    return params


def add_head(params: ParamSet, cfg: EncoderConfig, seed) -> ParamSet:
    """Copy of ``params`` with a freshly initialized projection head."""
    out = params.subset("enc.")
    _init_mlp(cfg.head_dims, "head", np.random.default_rng(seed), out)
    return out


def _n_layers(params, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def _mlp_forward(params, prefix: str, X: np.ndarray) -> np.ndarray:
    n = _n_layers(params, prefix)
    if n == 0:
        raise KeyError(f"no {prefix}.* layers in parameter set")
    h = np.asarray(X, dtype=np.float64)
    for i in range(n):
        W, b = params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"]
        if h.shape[-1] != W.shape[1]:
            raise ValueError(f"{prefix}.{i}: input dim {h.shape[-1]} != {W.shape[1]}")
        h = h @ W.T + b
        if i < n - 1:
            h = np.maximum(h, 0.0)
    return h


def encode(params, X: np.ndarray) -> np.ndarray:
    """Encoder features for a vector or a batch of row vectors."""
    return _mlp_forward(params, "enc", X)


def project(params, Z: np.ndarray) -> np.ndarray:
    """Student projection head applied to features."""
    return _mlp_forward(params, "head", Z)


def mlp_on_tape(tape: Tape, weights: Mapping[str, Var], prefix: str, x: Var) -> Var:
    """Same network as :func:`encode`/:func:`project`, recorded on ``tape``."""
    h = x
    n = sum(1 for k in weights if k.startswith(prefix + ".") and k.endswith(".W"))
    for i in range(n):
        h = tape.add(tape.matmul(h, weights[f"{prefix}.{i}.W"], transpose_b=True), weights[f"{prefix}.{i}.b"])
        if i < n - 1:
            h = tape.relu(h)
    return h


def register(tape: Tape, params: ParamSet, prefix: str = "") -> dict[str, Var]:
    return {name: tape.param(name, arr) for name, arr in params.items() if name.startswith(prefix)}


def ema_update(teacher: ParamSet, student: ParamSet, tau: float) -> ParamSet:
    """``tau * teacher + (1 - tau) * student`` over the teacher's (encoder) arrays."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidConfigError(f"tau must lie in [0, 1], got {tau}")
    out = ParamSet()
    for name, t in teacher.items():
        if name not in student or student[name].shape != t.shape:
            raise ValueError(f"teacher/student mismatch at {name!r}")
        out.add(name, tau * t + (1.0 - tau) * student[name])
    return out


@dataclass
class SGD:
    """SGD with heavy-ball momentum, applied in place to a ParamSet."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    _velocity: dict = field(default_factory=dict)

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            v = self._velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self._velocity[name] = v
            params[name] = params[name] - self.lr * v


def save_checkpoint(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(params)))
        for name, arr in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParamSet:
    raw = Path(path).read_bytes()

    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError("truncated checkpoint")
        return struct.unpack_from(fmt, raw, off), off + size

    if raw[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version, count), off = take("<IQ", 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params = ParamSet()
    for _ in range(count):
        (nlen,), off = take("<I", off)
        if off + nlen > len(raw):
            raise FormatError("truncated checkpoint")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,), off = take("<I", off)
        dims, off = take(f"<{rank}Q", off)
        size = 4 * int(np.prod(dims, dtype=np.int64))
        if off + size > len(raw):
            raise FormatError("truncated checkpoint")
        arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(dims)
        params.add(name, arr.astype(np.float64))
        off += size
    if off != len(raw):
        raise FormatError("trailing bytes after checkpoint payload")
    return params


def round_to_float32(params: ParamSet) -> ParamSet:
    """Values as they would come back from a checkpoint."""
    return ParamSet({n: a.astype(np.float32).astype(np.float64) for n, a in params.items()})
