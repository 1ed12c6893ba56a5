"""Fused loss + gradient kernels for cosine-classifier training.

These compute the same quantities as :func:`sslfewshot.loss.ssl_loss` and
:func:`sslfewshot.loss.sl_loss` but return analytic gradients directly,
without a tape. Stage-2 fitting runs hundreds of tiny SGD steps per episode,
so the tape's per-op Python overhead dominates there.

Two interchangeable implementations exist: explicit loops compiled with
numba, and vectorized numpy. :func:`loss_and_grads` and :func:`fit_prototypes`
dispatch on ``_accel.USE_NUMBA``; the ``*_numba`` and ``*_numpy`` variants are
public so tests and the benchmark can compare them.

Gradient of one row with adjusted logits ``a_i = (g_i s_c + s_i) / n_i``,
``g_i = beta |s_i - s_c|``, ``n_i = sqrt(g_i^2 + 2 g_i k_i + 1)`` and
``k_i = <w_c, w_i>``, given ``p = dL/da``::

    dL/ds_i += p_i / n_i
    dL/ds_c += p_i g_i / n_i - 1/m
    dL/dg_i  = p_i (s_c / n_i - a_i (g_i + k_i) / n_i^2)
    dL/dk_i  = -p_i a_i g_i / n_i^2

With ``detach`` the ``g`` and ``n`` paths are dropped.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit

__all__ = [
    "loss_and_grads",
    "loss_and_grads_numpy",
    "loss_and_grads_numba",
    "fit_prototypes",
    "fit_prototypes_numpy",
    "fit_prototypes_numba",
    "normalize_columns_inplace",
]


# -- numpy path ---------------------------------------------------------------

def _normalize_backward(unit: np.ndarray, norms: np.ndarray, g: np.ndarray, eps: float, axis: int):
    proj = (unit * g).sum(axis=axis, keepdims=True)
    live = norms >= eps
    return np.where(live, g - unit * proj, g) / np.maximum(norms, eps)


def loss_and_grads_numpy(W, F, y, alpha, ssl=True, beta=1.0, detach=False, eps=1e-12):
    """Returns ``(loss, dL/dW, dL/dF)`` for raw (unnormalized) ``W`` and ``F``."""
    W = np.asarray(W, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    m = F.shape[0]
    rows = np.arange(m)

    wn = np.sqrt((W * W).sum(axis=0, keepdims=True))
    Wh = W / np.maximum(wn, eps)
    fn = np.sqrt((F * F).sum(axis=1, keepdims=True))
    Fh = F / np.maximum(fn, eps)
    S = alpha * (Fh @ Wh)
    sc = S[rows, y][:, None]

    if ssl:
        diff = S - sc
        G = beta * np.abs(diff)
        gram = Wh.T @ Wh
        K = gram[y]
        N = np.sqrt(G * G + 2.0 * G * K + 1.0)
        A = (G * sc + S) / N
    else:
        A = S

    peak = A.max(axis=1, keepdims=True)
    z = np.exp(A - peak)
    total = z.sum(axis=1, keepdims=True)
    loss = float(np.mean(peak[:, 0] + np.log(total[:, 0]) - sc[:, 0]))
    P = z / total / m

    dgram = None
    if ssl:
        dS = P / N
        dsc = (P * G / N).sum(axis=1)
        if not detach:
            dG = P * (sc / N - A * (G + K) / (N * N))
            dK = -P * A * G / (N * N)
            ds_gap = dG * beta * np.sign(diff)
            dS = dS + ds_gap
            dsc = dsc - ds_gap.sum(axis=1)
            dgram = np.zeros_like(gram)
            np.add.at(dgram, y, dK)
    else:
        dS = P.copy()
        dsc = np.zeros(m)
    dS[rows, y] += dsc - 1.0 / m

    dWh = alpha * (Fh.T @ dS)
    if dgram is not None:
        dWh += Wh @ (dgram + dgram.T)
    dFh = alpha * (dS @ Wh.T)
    dW = _normalize_backward(Wh, wn, dWh, eps, axis=0)
    dF = _normalize_backward(Fh, fn, dFh, eps, axis=1)
    return loss, dW, dF


def normalize_columns_inplace(W: np.ndarray, eps: float = 1e-12) -> None:
    W /= np.maximum(np.sqrt((W * W).sum(axis=0, keepdims=True)), eps)


def fit_prototypes_numpy(W0, F, y, batches, lr, alpha, ssl=True, beta=1.0, detach=False,
                         momentum=0.0, weight_decay=0.0, eps=1e-12):
    """SGD on prototype columns only; ``batches`` is an (iterations, batch) index array."""
    W = np.array(W0, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    vel = np.zeros_like(W)
    for idx in np.asarray(batches, dtype=np.int64):
        _, dW, _ = loss_and_grads_numpy(W, F[idx], y[idx], alpha, ssl, beta, detach, eps)
        if weight_decay:
            dW = dW + weight_decay * W
        if momentum:
            vel = momentum * vel + dW
            dW = vel
        W -= lr * dW
        normalize_columns_inplace(W, eps)
    return W


# -- numba path ---------------------------------------------------------------

@njit
def _loss_and_grads_loops(W, F, y, alpha, ssl, beta, detach, eps):
    d, C = W.shape
    m = F.shape[0]

    wn = np.empty(C)
    Wh = np.empty((d, C))
    for i in range(C):
        s = 0.0
        for k in range(d):
            s += W[k, i] * W[k, i]
        wn[i] = math.sqrt(s)
        den = max(wn[i], eps)
        for k in range(d):
            Wh[k, i] = W[k, i] / den

    fn = np.empty(m)
    Fh = np.empty((m, d))
    for j in range(m):
        s = 0.0
        for k in range(d):
            s += F[j, k] * F[j, k]
        fn[j] = math.sqrt(s)
        den = max(fn[j], eps)
        for k in range(d):
            Fh[j, k] = F[j, k] / den

    S = np.zeros((m, C))
    for j in range(m):
        for i in range(C):
            s = 0.0
            for k in range(d):
                s += Fh[j, k] * Wh[k, i]
            S[j, i] = alpha * s

    gram = np.zeros((C, C))
    if ssl:
        for a in range(C):
            for b in range(C):
                s = 0.0
                for k in range(d):
                    s += Wh[k, a] * Wh[k, b]
                gram[a, b] = s

    dS = np.zeros((m, C))
    dgram = np.zeros((C, C))
    A = np.empty(C)
    G = np.empty(C)
    N = np.empty(C)
    loss = 0.0
    inv_m = 1.0 / m
    for j in range(m):
        c = y[j]
        sc = S[j, c]
        peak = -np.inf
        for i in range(C):
            if ssl:
                g = beta * abs(S[j, i] - sc)
                n = math.sqrt(g * g + 2.0 * g * gram[c, i] + 1.0)
                G[i] = g
                N[i] = n
                A[i] = (g * sc + S[j, i]) / n
            else:
                A[i] = S[j, i]
            if A[i] > peak:
                peak = A[i]
        total = 0.0
        for i in range(C):
            total += math.exp(A[i] - peak)
        loss += peak + math.log(total) - sc

        dsc = -inv_m
        for i in range(C):
            p = math.exp(A[i] - peak) / total * inv_m
            if ssl:
                n = N[i]
                g = G[i]
                dS[j, i] += p / n
                dsc += p * g / n
                if not detach:
                    k = gram[c, i]
                    dg = p * (sc / n - A[i] * (g + k) / (n * n))
                    diff = S[j, i] - sc
                    sgn = 1.0 if diff > 0.0 else (-1.0 if diff < 0.0 else 0.0)
                    dS[j, i] += dg * beta * sgn
                    dsc -= dg * beta * sgn
                    dgram[c, i] += -p * A[i] * g / (n * n)
            else:
                dS[j, i] += p
        dS[j, c] += dsc

    dWh = np.zeros((d, C))
    for k in range(d):
        for i in range(C):
            s = 0.0
            for j in range(m):
                s += Fh[j, k] * dS[j, i]
            dWh[k, i] = alpha * s
    if ssl and not detach:
        for k in range(d):
            for i in range(C):
                s = 0.0
                for b in range(C):
                    s += Wh[k, b] * (dgram[b, i] + dgram[i, b])
                dWh[k, i] += s

    dW = np.empty((d, C))
    for i in range(C):
        proj = 0.0
        for k in range(d):
            proj += Wh[k, i] * dWh[k, i]
        if wn[i] >= eps:
            for k in range(d):
                dW[k, i] = (dWh[k, i] - Wh[k, i] * proj) / wn[i]
        else:
            for k in range(d):
                dW[k, i] = dWh[k, i] / eps

    dF = np.empty((m, d))
    for j in range(m):
        for k in range(d):
            s = 0.0
            for i in range(C):
                s += dS[j, i] * Wh[k, i]
            dF[j, k] = alpha * s
        proj = 0.0
        for k in range(d):
            proj += Fh[j, k] * dF[j, k]
        if fn[j] >= eps:
            for k in range(d):
                dF[j, k] = (dF[j, k] - Fh[j, k] * proj) / fn[j]
        else:
            for k in range(d):
                dF[j, k] = dF[j, k] / eps

    return loss * inv_m, dW, dF


@njit
def _fit_loops(W0, F, y, batches, lr, alpha, ssl, beta, detach, momentum, weight_decay, eps):
    W = W0.copy()
    d, C = W.shape
    vel = np.zeros((d, C))
    n_iter, bs = batches.shape
    Fb = np.empty((bs, F.shape[1]))
    yb = np.empty(bs, dtype=np.int64)
    for it in range(n_iter):
        for r in range(bs):
            idx = batches[it, r]
            Fb[r, :] = F[idx, :]
            yb[r] = y[idx]
        _, dW, _ = _loss_and_grads_loops(W, Fb, yb, alpha, ssl, beta, detach, eps)
        for k in range(d):
            for i in range(C):
                g = dW[k, i] + weight_decay * W[k, i]
                if momentum != 0.0:
                    vel[k, i] = momentum * vel[k, i] + g
                    g = vel[k, i]
                W[k, i] -= lr * g
        for i in range(C):
            s = 0.0
            for k in range(d):
                s += W[k, i] * W[k, i]
            den = max(math.sqrt(s), eps)
            for k in range(d):
                W[k, i] /= den
    return W


def loss_and_grads_numba(W, F, y, alpha, ssl=True, beta=1.0, detach=False, eps=1e-12):
    return _loss_and_grads_loops(
        np.ascontiguousarray(W, dtype=np.float64),
        np.ascontiguousarray(F, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        float(alpha), bool(ssl), float(beta), bool(detach), float(eps),
    )


def fit_prototypes_numba(W0, F, y, batches, lr, alpha, ssl=True, beta=1.0, detach=False,
                         momentum=0.0, weight_decay=0.0, eps=1e-12):
    batches = np.ascontiguousarray(batches, dtype=np.int64)
    if batches.ndim != 2:
        raise ValueError(f"batches must be (iterations, batch_size), got shape {batches.shape}")
    return _fit_loops(
        np.ascontiguousarray(W0, dtype=np.float64),
        np.ascontiguousarray(F, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        batches, float(lr), float(alpha), bool(ssl), float(beta), bool(detach),
        float(momentum), float(weight_decay), float(eps),
    )


def loss_and_grads(W, F, y, alpha, ssl=True, beta=1.0, detach=False, eps=1e-12):
    impl = loss_and_grads_numba if _accel.USE_NUMBA else loss_and_grads_numpy
    return impl(W, F, y, alpha, ssl, beta, detach, eps)


def fit_prototypes(W0, F, y, batches, lr, alpha, ssl=True, beta=1.0, detach=False,
                   momentum=0.0, weight_decay=0.0, eps=1e-12):
    impl = fit_prototypes_numba if _accel.USE_NUMBA else fit_prototypes_numpy
    return impl(W0, F, y, batches, lr, alpha, ssl, beta, detach, momentum, weight_decay, eps)
