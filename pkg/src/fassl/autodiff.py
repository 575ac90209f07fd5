"""Reverse-mode differentiation over a small, fixed set of array ops.

A :class:`Tape` records every op applied to its variables. By default ops are
evaluated as they are recorded, so intermediate values can be inspected while
a graph is being built; :meth:`Tape.forward` replays the recorded graph with
new parameter or input values, and :meth:`Tape.backward` accumulates
gradients for every registered parameter.

Supported ops: ``matmul``, ``add``, ``scalar_mul``, ``relu``, ``exp``,
``log``, ``sum``, ``l2_normalize``, ``inner_product``,
``cosine_similarity``, ``squared_distance`` and ``logsumexp``. Row-wise ops
treat a 2-D array as a batch of rows and a 1-D array as a single row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import kernels


class GraphError(ValueError):
    """Malformed graph: shape mismatch or unknown node."""


class NumericError(ArithmeticError):
    """A node produced a non-finite value."""

    def __init__(self, node_id: int, op: str, detail: str = "non-finite value"):
        super().__init__(f"node {node_id} ({op}): {detail}")
        self.node_id = node_id
        self.op = op


class StateError(RuntimeError):
    """Tape used out of order (e.g. backward before forward)."""


class ContractError(ValueError):
    """Caller violated a precondition of a tape-level operation."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    value: np.ndarray | None = None
    cache: Any = None


@dataclass(frozen=True)
class Var:
    """Handle to a tape node."""

    tape: "Tape"
    id: int

    @property
    def value(self) -> np.ndarray:
        v = self.tape.nodes[self.id].value
        if v is None:
            raise StateError("node has not been evaluated; call forward() first")
        return v

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _rows(x: np.ndarray) -> np.ndarray:
    return x[None, :] if x.ndim == 1 else x


def _unrows(x: np.ndarray, like_ndim: int) -> np.ndarray:
    return x[0] if like_ndim == 1 else x


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise GraphError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Each op: forward(tape, node, *vals) -> (value, cache) and
# backward(g, node, *vals) -> tuple of input gradients (None = no gradient).


def _matmul_fwd(tape, node, a, b):
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise GraphError(f"matmul: unsupported ranks {a.ndim}, {b.ndim}")
    rhs = b.T if (node.attrs.get("transpose_b") and b.ndim == 2) else b
    if a.shape[1] != rhs.shape[0]:
        raise GraphError(f"matmul: inner dims {a.shape} x {rhs.shape}")
    return a @ rhs, None


def _matmul_bwd(g, node, a, b):
    transpose = node.attrs.get("transpose_b") and b.ndim == 2
    rhs = b.T if transpose else b
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    ga = g @ rhs.T
    grhs = a.T @ g
    return ga, (grhs.T if transpose else grhs)


def _add_fwd(tape, node, a, b):
    if a.shape == b.shape:
        return a + b, None
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return a + b[None, :], None
    raise GraphError(f"add: shape mismatch {a.shape} vs {b.shape}")


def _add_bwd(g, node, a, b):
    return g, (g if a.shape == b.shape else g.sum(axis=0))


def _scalar_mul_fwd(tape, node, a):
    return a * node.attrs["c"], None


def _scalar_mul_bwd(g, node, a):
    return (g * node.attrs["c"],)


def _relu_fwd(tape, node, a):
    return np.maximum(a, 0.0), None


def _relu_bwd(g, node, a):
    return (g * (a > 0),)


def _exp_fwd(tape, node, a):
    return np.exp(a), None


def _exp_bwd(g, node, a):
    return (g * node.value,)


def _log_fwd(tape, node, a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a), None


def _log_bwd(g, node, a):
    return (g / a,)


def _sum_fwd(tape, node, a):
    axis = node.attrs.get("axis")
    if axis is not None and (a.ndim != 2 or axis != 1):
        raise GraphError("sum: only full reduction or axis=1 of a matrix")
    return np.asarray(a.sum(axis=axis)), None


def _sum_bwd(g, node, a):
    if node.attrs.get("axis") is None:
        return (np.full(a.shape, float(g)),)
    return (np.repeat(g[:, None], a.shape[1], axis=1),)


def _l2n_fwd(tape, node, a):
    y, norms = kernels.l2n_rows(_rows(a))
    n_guarded = int(np.count_nonzero(norms < kernels._kernels_py.NORM_EPS))
    if n_guarded:
        tape.collapse_warnings += n_guarded
    return _unrows(y, a.ndim), (y, norms)


def _l2n_bwd(g, node, a):
    y, norms = node.cache
    return (_unrows(kernels.l2n_rows_backward(_rows(g), y, norms), a.ndim),)


def _inner_fwd(tape, node, a, b):
    _same_shape("inner_product", a, b)
    if a.ndim == 1:
        return np.asarray(a @ b), None
    return np.einsum("ij,ij->i", a, b), None


def _inner_bwd(g, node, a, b):
    gg = g if a.ndim == 1 else g[:, None]
    return gg * b, gg * a


def _cos_fwd(tape, node, a, b):
    _same_shape("cosine_similarity", a, b)
    cos, na, nb = kernels.cosine_rows(_rows(a), _rows(b))
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise NumericError(node_id=-1, op="cosine_similarity", detail="zero-norm input")
    out = cos[0] if a.ndim == 1 else cos
    return np.asarray(out), (cos, na, nb)


def _cos_bwd(g, node, a, b):
    cos, na, nb = node.cache
    ga, gb = kernels.cosine_rows_backward(np.atleast_1d(g), _rows(a), _rows(b), cos, na, nb)
    return _unrows(ga, a.ndim), _unrows(gb, b.ndim)


def _sqdist_fwd(tape, node, a, b):
    _same_shape("squared_distance", a, b)
    d = a - b
    if a.ndim == 1:
        return np.asarray(d @ d), d
    return np.einsum("ij,ij->i", d, d), d


def _sqdist_bwd(g, node, a, b):
    d = node.cache
    gg = 2.0 * (g if a.ndim == 1 else g[:, None]) * d
    return gg, -gg


def _lse_fwd(tape, node, a):
    mask = node.attrs.get("mask")
    x = _rows(a)
    if mask is not None:
        mask = _rows(np.asarray(mask, dtype=bool))
        if mask.shape != x.shape:
            raise GraphError(f"logsumexp: mask shape {mask.shape} vs {x.shape}")
        if not np.all(mask.any(axis=1)):
            raise GraphError("logsumexp: a row has no unmasked entries")
    out, probs = kernels.lse_rows(x, mask)
    return np.asarray(out[0] if a.ndim == 1 else out), probs


def _lse_bwd(g, node, a):
    probs = node.cache
    return (_unrows(probs * np.atleast_1d(g)[:, None], a.ndim),)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "scalar_mul": (_scalar_mul_fwd, _scalar_mul_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "l2_normalize": (_l2n_fwd, _l2n_bwd),
    "inner_product": (_inner_fwd, _inner_bwd),
    "cosine_similarity": (_cos_fwd, _cos_bwd),
    "squared_distance": (_sqdist_fwd, _sqdist_bwd),
    "logsumexp": (_lse_fwd, _lse_bwd),
}


class Tape:
    """Recorded computation graph.

    With ``eager=True`` (default) each op is evaluated when recorded. With
    ``eager=False`` only the structure is recorded and :meth:`forward` must be
    called before values or gradients are available.
    """

    def __init__(self, eager: bool = True):
        self.eager = eager
        self.nodes: list[Node] = []
        self.collapse_warnings = 0
        self._param_ids: dict[str, int] = {}
        self._input_ids: dict[str, int] = {}
        self._output: int | None = None
        self._evaluated = eager

    # -- leaves -----------------------------------------------------------

    def param(self, name: str, value) -> Var:
        if name in self._param_ids:
            raise GraphError(f"duplicate parameter name {name!r}")
        var = self._leaf("param", value, name)
        self._param_ids[name] = var.id
        return var

    def constant(self, value, name: str | None = None) -> Var:
        if name is not None:
            if name in self._input_ids:
                raise GraphError(f"duplicate input name {name!r}")
        var = self._leaf("const", value, name)
        if name is not None:
            self._input_ids[name] = var.id
        return var

    def _leaf(self, kind, value, name):
        arr = np.array(value, dtype=np.float64)
        node = Node(kind, (), name=name, value=arr)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    @property
    def param_names(self) -> list[str]:
        return list(self._param_ids)

    # -- ops --------------------------------------------------------------

    def _record(self, op: str, inputs, **attrs) -> Var:
        ids = []
        for v in inputs:
            if not isinstance(v, Var) or v.tape is not self:
                raise GraphError(f"{op}: input is not a variable of this tape")
            ids.append(v.id)
        node = Node(op, tuple(ids), attrs)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        if self.eager:
            self._eval(nid)
        self._output = nid
        return Var(self, nid)

    def matmul(self, a: Var, b: Var, transpose_b: bool = False) -> Var:
        return self._record("matmul", (a, b), transpose_b=transpose_b)

    def add(self, a: Var, b: Var) -> Var:
        return self._record("add", (a, b))

    def scalar_mul(self, a: Var, c: float) -> Var:
        return self._record("scalar_mul", (a,), c=float(c))

    def relu(self, a: Var) -> Var:
        return self._record("relu", (a,))

    def exp(self, a: Var) -> Var:
        return self._record("exp", (a,))

    def log(self, a: Var) -> Var:
        return self._record("log", (a,))

    def sum(self, a: Var, axis: int | None = None) -> Var:
        return self._record("sum", (a,), axis=axis)

    def l2_normalize(self, a: Var) -> Var:
        return self._record("l2_normalize", (a,))

    def inner_product(self, a: Var, b: Var) -> Var:
        return self._record("inner_product", (a, b))

    def cosine_similarity(self, a: Var, b: Var) -> Var:
        return self._record("cosine_similarity", (a, b))

    def squared_distance(self, a: Var, b: Var) -> Var:
        return self._record("squared_distance", (a, b))

    def logsumexp(self, a: Var, mask=None) -> Var:
        m = None if mask is None else np.array(mask, dtype=bool)
        return self._record("logsumexp", (a,), mask=m)

    # -- evaluation -------------------------------------------------------

    def _eval(self, nid: int) -> None:
        node = self.nodes[nid]
        fwd, _ = _OPS[node.op]
        vals = [self.nodes[i].value for i in node.inputs]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                value, cache = fwd(self, node, *vals)
        except NumericError as exc:
            raise NumericError(nid, node.op, str(exc).split(": ", 1)[-1]) from None
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(nid, node.op)
        node.value, node.cache = value, cache

    def set_output(self, var: Var) -> None:
        self._output = var.id

    def forward(self, params: Mapping[str, np.ndarray] | None = None,
                inputs: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Re-evaluate every node, optionally with new leaf values."""
        for name, value in (params or {}).items():
            self._set_leaf(self._param_ids, name, value, "parameter")
        for name, value in (inputs or {}).items():
            self._set_leaf(self._input_ids, name, value, "input")
        self.collapse_warnings = 0
        for nid, node in enumerate(self.nodes):
            if node.op not in ("param", "const"):
                self._eval(nid)
        self._evaluated = True
        return self.output_value()

    def _set_leaf(self, table, name, value, kind):
        if name not in table:
            raise GraphError(f"unknown {kind} {name!r}")
        node = self.nodes[table[name]]
        arr = np.array(value, dtype=np.float64)
        if arr.shape != node.value.shape:
            raise GraphError(f"{kind} {name!r}: shape {arr.shape} != {node.value.shape}")
        node.value = arr

    def output_value(self) -> np.ndarray:
        if self._output is None:
            raise StateError("tape has no output")
        return self.nodes[self._output].value

    def backward(self, output: Var | None = None, seed_grad: float = 1.0) -> dict[str, np.ndarray]:
        """Gradients of a scalar output w.r.t. every registered parameter."""
        if not self._evaluated:
            raise StateError("backward() called before forward()")
        out_id = self._output if output is None else output.id
        if out_id is None:
            raise StateError("tape has no output")
        out_val = self.nodes[out_id].value
        if out_val.size != 1:
            raise ContractError(f"output must be scalar, got shape {out_val.shape}")
        grads: dict[int, np.ndarray] = {out_id: np.full(out_val.shape, float(seed_grad))}
        for nid in range(out_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or not node.inputs:
                continue
            _, bwd = _OPS[node.op]
            vals = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, bwd(g, node, *vals)):
                if gi is None or self.nodes[i].op == "const":
                    continue
                gi = np.asarray(gi, dtype=np.float64).reshape(self.nodes[i].value.shape)
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return {
            name: grads.get(pid, np.zeros_like(self.nodes[pid].value))
            for name, pid in self._param_ids.items()
        }

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: self.nodes[pid].value.copy() for name, pid in self._param_ids.items()}


def forward(tape: Tape, params=None, inputs=None) -> np.ndarray:
    return tape.forward(params, inputs)


def backward(tape: Tape, seed_grad: float = 1.0) -> dict[str, np.ndarray]:
    return tape.backward(seed_grad=seed_grad)


def grad_check(tape: Tape, eps: float = 1e-6, names=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Each coordinate of each parameter is perturbed independently. The error
    for a coordinate is ``|a - fd| / max(1e-12, |a| + |fd|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = tape.param_values()
    tape.forward(base)
    if tape.output_value().size != 1:
        raise ContractError("grad_check needs a scalar output")
    analytic = tape.backward()
    worst = 0.0
    for name in names or list(base):
        theta = base[name]
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + eps
            f_plus = float(tape.forward({name: theta}))
            theta[idx] = orig - eps
            f_minus = float(tape.forward({name: theta}))
            theta[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name][idx])
            err = abs(a - fd) / max(1e-12, abs(a) + abs(fd))
            worst = max(worst, err)
        tape.forward({name: theta})
    return worst
