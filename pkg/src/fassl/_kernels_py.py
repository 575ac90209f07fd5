"""Pure-numpy reference kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature; :mod:`fassl.kernels` picks one at import time.
"""

import numpy as np

NORM_EPS = 1e-12


def lse_rows(x, mask=None):
    """Row-wise log-sum-exp over entries where ``mask`` is true.

    Returns ``(out, probs)`` where ``probs`` is the masked softmax, which is
    also the gradient of ``out[i]`` with respect to row ``i``.
    """
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        xm = np.where(mask, x, -np.inf)
        m = xm.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(xm - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    return out, e / s


def l2n_rows(x):
    """Row-wise L2 normalization. Rows with norm below 1e-12 map to zero.

    Returns ``(y, norms)``.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = norms >= NORM_EPS
    y = np.zeros_like(x)
    y[safe] = x[safe] / norms[safe, None]
    return y, norms


def l2n_rows_backward(g, y, norms):
    """Vector-Jacobian product of :func:`l2n_rows`; guarded rows get zero."""
    g = np.asarray(g, dtype=np.float64)
    dot = np.einsum("ij,ij->i", g, y)
    safe = norms >= NORM_EPS
    out = np.zeros_like(g)
    out[safe] = (g[safe] - y[safe] * dot[safe, None]) / norms[safe, None]
    return out


def cosine_rows(a, b):
    """Row-wise cosine similarity. Returns ``(cos, norm_a, norm_b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    return cos, na, nb


def cosine_rows_backward(g, a, b, cos, na, nb):
    g = np.asarray(g, dtype=np.float64)[:, None]
    ga = g * (b / (na * nb)[:, None] - a * (cos / (na * na))[:, None])
    gb = g * (a / (na * nb)[:, None] - b * (cos / (nb * nb))[:, None])
    return ga, gb


def nearest_cosine(queries, keys):
    """For each query row, index of the key row with largest cosine.

    Ties resolve to the lowest key index. Zero-norm queries return -1;
    zero-norm keys are never selected.
    """
    qn, qnorm = l2n_rows(queries)
    kn, knorm = l2n_rows(keys)
    sims = qn @ kn.T
    sims[:, knorm < NORM_EPS] = -np.inf
    idx = np.argmax(sims, axis=1).astype(np.int64)
    idx[qnorm < NORM_EPS] = -1
    if keys.shape[0] == 0 or np.all(knorm < NORM_EPS):
        idx[:] = -1
    return idx
