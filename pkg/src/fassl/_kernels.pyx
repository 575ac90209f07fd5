# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()

cdef double NORM_EPS = 1e-12


def lse_rows(x, mask=None):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    cdef cnp.uint8_t[:, ::1] mv
    cdef bint masked = mask is not None
    if masked:
        mv = np.ascontiguousarray(mask, dtype=np.uint8)
    out = np.empty(n, dtype=np.float64)
    probs = np.zeros((n, m), dtype=np.float64)
    cdef double[::1] ov = out
    cdef double[:, ::1] pv = probs
    cdef double mx, s, e
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            if (not masked or mv[i, j]) and xv[i, j] > mx:
                mx = xv[i, j]
        s = 0.0
        for j in range(m):
            if not masked or mv[i, j]:
                e = exp(xv[i, j] - mx)
                pv[i, j] = e
                s += e
        for j in range(m):
            pv[i, j] /= s
        ov[i] = mx + log(s)
    return out, probs


def l2n_rows(x):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j
    y = np.zeros((n, d), dtype=np.float64)
    norms = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] yv = y
    cdef double[::1] nv = norms
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += xv[i, j] * xv[i, j]
        s = sqrt(s)
        nv[i] = s
        if s >= NORM_EPS:
            for j in range(d):
                yv[i, j] = xv[i, j] / s
    return y, norms


def l2n_rows_backward(g, y, norms):
    cdef double[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] nv = np.ascontiguousarray(norms, dtype=np.float64)
    cdef Py_ssize_t n = gv.shape[0], d = gv.shape[1], i, j
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double dot
    for i in range(n):
        if nv[i] < NORM_EPS:
            continue
        dot = 0.0
        for j in range(d):
            dot += gv[i, j] * yv[i, j]
        for j in range(d):
            ov[i, j] = (gv[i, j] - yv[i, j] * dot) / nv[i]
    return out


def cosine_rows(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], d = av.shape[1], i, j
    cos = np.empty(n, dtype=np.float64)
    na = np.empty(n, dtype=np.float64)
    nb = np.empty(n, dtype=np.float64)
    cdef double[::1] cv = cos, nav = na, nbv = nb
    cdef double sa, sb, sab
    for i in range(n):
        sa = 0.0
        sb = 0.0
        sab = 0.0
        for j in range(d):
            sa += av[i, j] * av[i, j]
            sb += bv[i, j] * bv[i, j]
            sab += av[i, j] * bv[i, j]
        nav[i] = sqrt(sa)
        nbv[i] = sqrt(sb)
        cv[i] = sab / (nav[i] * nbv[i])
    return cos, na, nb


def cosine_rows_backward(g, a, b, cos, na, nb):
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] cv = np.ascontiguousarray(cos, dtype=np.float64)
    cdef double[::1] nav = np.ascontiguousarray(na, dtype=np.float64)
    cdef double[::1] nbv = np.ascontiguousarray(nb, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], d = av.shape[1], i, j
    ga = np.empty((n, d), dtype=np.float64)
    gb = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gav = ga, gbv = gb
    cdef double inv_ab, ca, cb
    for i in range(n):
        inv_ab = 1.0 / (nav[i] * nbv[i])
        ca = cv[i] / (nav[i] * nav[i])
        cb = cv[i] / (nbv[i] * nbv[i])
        for j in range(d):
            gav[i, j] = gv[i] * (bv[i, j] * inv_ab - av[i, j] * ca)
            gbv[i, j] = gv[i] * (av[i, j] * inv_ab - bv[i, j] * cb)
    return ga, gb


def nearest_cosine(queries, keys):
    # similarities go through BLAS; only the guarded argmax is hand-rolled
    qn, qnorm_arr = l2n_rows(queries)
    kn, knorm_arr = l2n_rows(keys)
    cdef double[:, ::1] sv = np.ascontiguousarray(np.dot(qn, kn.T))
    cdef double[::1] qnorm = qnorm_arr
    cdef double[::1] knorm = knorm_arr
    cdef Py_ssize_t nq = sv.shape[0], nk = sv.shape[1], i, j, best
    cdef double bestv
    idx = np.full(nq, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] iv = idx
    for i in range(nq):
        if qnorm[i] < NORM_EPS:
            continue
        best = -1
        bestv = -INFINITY
        for j in range(nk):
            if knorm[j] >= NORM_EPS and sv[i, j] > bestv:
                bestv = sv[i, j]
                best = j
        iv[i] = best
    return idx
