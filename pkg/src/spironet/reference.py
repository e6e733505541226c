"""Naive loop reference implementations used as verification oracles.

Everything here is written as directly as possible (nested Python loops over
plain float arrays) and must stay independent of the vectorized fast paths it
checks. Used by the verification suites and the test suite; never on a hot
path.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "naive_conv2d",
    "naive_maxpool2d",
    "naive_batchnorm2d_train",
    "naive_matmul",
    "naive_adaptive_avg_pool2d",
    "naive_bce",
    "linear_op_adjoint",
]


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Six-nested-loop cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[ni, ci, i * stride + ki, j * stride + kj] * w[co, ci, ki, kj]
                    out[ni, co, i, j] = acc
    return out


def naive_maxpool2d(x, k, stride):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -math.inf
                    for ki in range(k):
                        for kj in range(k):
                            v = x[ni, ci, i * stride + ki, j * stride + kj]
                            if v > best:
                                best = v
                    out[ni, ci, i, j] = best
    return out


def naive_batchnorm2d_train(x, gamma, beta, eps=1e-5):
    """Per-channel normalization with loop-computed statistics."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ci in range(c):
        vals = []
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    vals.append(x[ni, ci, i, j])
        m = sum(vals) / len(vals)
        var = sum((v - m) ** 2 for v in vals) / len(vals)
        inv = 1.0 / math.sqrt(var + eps)
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    out[ni, ci, i, j] = gamma[ci] * (x[ni, ci, i, j] - m) * inv + beta[ci]
    return out


def naive_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r, k = a.shape
    _, c = b.shape
    out = np.zeros((r, c))
    for i in range(r):
        for j in range(c):
            acc = 0.0
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


def naive_adaptive_avg_pool2d(x, o):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros((n, c, o, o))
    for ni in range(n):
        for ci in range(c):
            for i in range(o):
                h0, h1 = i * h // o, math.ceil((i + 1) * h / o)
                for j in range(o):
                    w0, w1 = j * w // o, math.ceil((j + 1) * w / o)
                    acc = 0.0
                    for a in range(h0, h1):
                        for bcol in range(w0, w1):
                            acc += x[ni, ci, a, bcol]
                    out[ni, ci, i, j] = acc / ((h1 - h0) * (w1 - w0))
    return out


def naive_bce(logits, target):
    """Direct probability-space BCE with clamped probabilities."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    total = 0.0
    for zi, ti in zip(z, t):
        p = 1.0 / (1.0 + math.exp(-zi))
        p = min(max(p, 1e-300), 1.0 - 1e-16)
        total += -(ti * math.log(p) + (1.0 - ti) * math.log(1.0 - p))
    return total / len(z)


def linear_op_adjoint(forward, in_shape, out_shape):
    """Materialize the adjoint of a linear map by probing with unit vectors.

    Returns a function applying the adjoint to arrays of out_shape. O(n*m);
    for small verification cases only.
    """
    n_in = int(np.prod(in_shape))
    n_out = int(np.prod(out_shape))
    mat = np.zeros((n_out, n_in))
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        mat[:, i] = np.asarray(forward(e.reshape(in_shape))).ravel()

    def adjoint(g):
        return (mat.T @ np.asarray(g, dtype=np.float64).ravel()).reshape(in_shape)

    return adjoint
