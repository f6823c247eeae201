# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: sequential weighted draws and fused row-wise cross-entropy."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def sample_sequential(double[::1] weights, Py_ssize_t k, double[::1] uniforms):
    cdef Py_ssize_t n = weights.shape[0]
    cdef Py_ssize_t draw, i, pick, last
    cdef double total, target, acc
    if k > n:
        raise ValueError(f"cannot draw {k} items from {n}")
    if uniforms.shape[0] < k:
        raise ValueError("need one uniform per draw")
    out = np.empty(k, dtype=np.int64)
    cdef long long[::1] out_v = out
    taken_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    for draw in range(k):
        total = 0.0
        last = -1
        for i in range(n):
            if not taken[i]:
                total = total + weights[i]
                last = i
        target = uniforms[draw] * total
        acc = 0.0
        pick = last
        for i in range(n):
            if taken[i]:
                acc = acc + 0.0
                continue
            acc = acc + weights[i]
            if acc > target:
                pick = i
                break
        taken[pick] = 1
        out_v[draw] = pick
    return out


def softmax_xent_rows(double[:, ::1] logits, long long[::1] labels, double smoothing):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t k = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, s, lse, tgt, p, off = smoothing / k, on = 1.0 - smoothing + smoothing / k
    losses = np.empty(n, dtype=np.float64)
    grad = np.empty((n, k), dtype=np.float64)
    cdef double[::1] loss_v = losses
    cdef double[:, ::1] g = grad
    for i in range(n):
        if labels[i] < 0 or labels[i] >= k:
            raise ValueError(f"label {labels[i]} out of range for {k} classes")
        m = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(k):
            s = s + exp(logits[i, j] - m)
        lse = m + log(s)
        loss_v[i] = 0.0
        for j in range(k):
            tgt = on if j == labels[i] else off
            p = exp(logits[i, j] - lse)
            loss_v[i] = loss_v[i] - tgt * (logits[i, j] - lse)
            g[i, j] = p - tgt
    return losses, grad
