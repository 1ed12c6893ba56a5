"""Cosine softmax loss (SL) and self-compacting softmax loss (SSL).

For an instance with embedding ``phi`` and true class ``c``, SSL pulls every
prototype toward the target before taking the softmax::

    gap_i  = |S(w_i, phi) - S(w_c, phi)|
    wdot_i = (gap_i * w_c + w_i) / ||gap_i * w_c + w_i||
    SSL    = -log( exp(S(w_c, phi)) / sum_i exp(S(wdot_i, phi)) )

with ``S(w, phi) = alpha * cos(w, phi)`` and prototypes taken at unit length.
Because ``wdot_i`` is a non-negative mix of ``w_c`` and ``w_i`` it never moves
away from ``w_c``, which shifts each angular-bisector decision boundary
toward ``w_c``. The target column itself is untouched (``gap_c == 0``).

Batched losses never materialize the per-instance ``(d, C)`` adjusted
matrices. With unit vectors the adjusted logit reduces to::

    S(wdot_i, phi) = (gap_i * S_c + S_i) / sqrt(gap_i**2 + 2 * gap_i * <w_c, w_i> + 1)

so only ``(m, C)`` quantities and the prototype Gram matrix are needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import ClassifierWeights, cosine_scores
from .tensor import DimensionError, Tensor

__all__ = [
    "AdjustedWeights",
    "adjust_weights",
    "ssl_probabilities",
    "ssl_logits",
    "ssl_loss",
    "sl_loss",
    "loss_fn",
]


@dataclass(frozen=True)
class AdjustedWeights:
    W_dot: Tensor  # (d, C), unit columns
    target: int


def _check_label(c: int, n_classes: int) -> int:
    c = int(c)
    if not 0 <= c < n_classes:
        raise IndexError(f"class index {c} out of range for {n_classes} classes")
    return c


def _check_labels(labels: Sequence[int], m: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    if y.size != m:
        raise DimensionError(f"{y.size} labels for {m} feature rows")
    if m < 1:
        raise ValueError("empty batch")
    bad = (y < 0) | (y >= n_classes)
    if bad.any():
        raise IndexError(f"label {int(y[bad][0])} out of range for {n_classes} classes")
    return y


def _one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _gap_factor(cw: ClassifierWeights, alpha_in_gap: bool) -> float:
    return 1.0 if alpha_in_gap else 1.0 / cw.alpha


def _single_feature(feat, d: int) -> Tensor:
    feat = T.constant(feat)
    if feat.shape != (1, d):
        raise DimensionError(f"expected a (1, {d}) feature row, got {feat.shape}")
    return feat


def adjust_weights(
    cw: ClassifierWeights,
    feat,
    c: int,
    *,
    alpha_in_gap: bool = False,
    detach_adjustment: bool = False,
) -> AdjustedWeights:
    """Per-instance adjusted prototypes, one unit column per class.

    ``alpha_in_gap=False`` measures the gap on raw cosines instead of
    ``alpha``-scaled scores. ``detach_adjustment`` treats the gap and the
    renormalizing length as constants in the gradient.
    """
    n_classes = cw.class_count
    c = _check_label(c, n_classes)
    feat = _single_feature(feat, cw.feature_dim)
    target = np.zeros((1, n_classes))
    target[0, c] = 1.0

    w_hat = T.l2_normalize_cols(cw.W, cw.eps)
    s = cosine_scores(cw, feat)
    s_c = T.sum(T.mul(s, target), axis=1, keepdims=True)
    gap = T.scale(T.absolute(T.sub(s, s_c)), _gap_factor(cw, alpha_in_gap))
    if detach_adjustment:
        gap = T.stop_gradient(gap)
    w_c = T.matmul(w_hat, target.T)
    combo = T.add(T.mul(w_c, gap), w_hat)
    length = T.sqrt(T.sum(T.mul(combo, combo), axis=0, keepdims=True))
    if detach_adjustment:
        length = T.stop_gradient(length)
    adjusted = T.div(combo, length)
    # the target column is w_hat_c bit for bit, not a renormalized copy of it
    w_dot = T.add(T.mul(adjusted, 1.0 - target), T.mul(w_hat, target))
    return AdjustedWeights(w_dot, c)


def ssl_probabilities(
    cw: ClassifierWeights,
    feat,
    c: int,
    *,
    alpha_in_gap: bool = False,
    detach_adjustment: bool = False,
) -> Tensor:
    """Softmax over ``alpha * cos(wdot_i, phi)``, shape (1, C)."""
    adj = adjust_weights(cw, feat, c, alpha_in_gap=alpha_in_gap, detach_adjustment=detach_adjustment)
    f_hat = T.l2_normalize_rows(feat, cw.eps)
    logits = T.scale(T.matmul(f_hat, adj.W_dot), cw.alpha)
    return T.exp(T.sub(logits, T.log_sum_exp_rows(logits)))


def ssl_logits(
    cw: ClassifierWeights,
    feats,
    labels: Sequence[int],
    *,
    alpha_in_gap: bool = False,
    detach_adjustment: bool = False,
) -> tuple[Tensor, Tensor]:
    """Adjusted logits (m, C) and the unadjusted target scores (m, 1)."""
    feats = T.constant(feats)
    y = _check_labels(labels, feats.shape[0], cw.class_count)
    onehot = _one_hot(y, cw.class_count)

    scores = cosine_scores(cw, feats)
    s_c = T.sum(T.mul(scores, onehot), axis=1, keepdims=True)
    gap = T.scale(T.absolute(T.sub(scores, s_c)), _gap_factor(cw, alpha_in_gap))
    w_hat = T.l2_normalize_cols(cw.W, cw.eps)
    # <w_c, w_i> for each row's own target c
    cross = T.gather_rows(T.matmul(T.transpose(w_hat), w_hat), y)
    length = T.sqrt(T.add(T.add(T.mul(gap, gap), T.scale(T.mul(gap, cross), 2.0)), 1.0))
    if detach_adjustment:
        gap, length = T.stop_gradient(gap), T.stop_gradient(length)
    logits = T.div(T.add(T.mul(gap, s_c), scores), length)
    return logits, s_c


def ssl_loss(
    cw: ClassifierWeights,
    feats,
    labels: Sequence[int],
    *,
    alpha_in_gap: bool = False,
    detach_adjustment: bool = False,
) -> Tensor:
    """Batch mean of the self-compacting softmax loss (scalar tensor)."""
    logits, s_c = ssl_logits(
        cw, feats, labels, alpha_in_gap=alpha_in_gap, detach_adjustment=detach_adjustment
    )
    return T.mean(T.log_sum_exp_rows(T.sub(logits, s_c)))


def sl_loss(cw: ClassifierWeights, feats, labels: Sequence[int]) -> Tensor:
    """Batch mean cross-entropy over plain cosine scores."""
    feats = T.constant(feats)
    y = _check_labels(labels, feats.shape[0], cw.class_count)
    scores = cosine_scores(cw, feats)
    s_c = T.sum(T.mul(scores, _one_hot(y, cw.class_count)), axis=1, keepdims=True)
    return T.mean(T.log_sum_exp_rows(T.sub(scores, s_c)))


def loss_fn(kind: str, *, alpha_in_gap: bool = False, detach_adjustment: bool = False):
    """``(cw, feats, labels) -> scalar Tensor`` for ``kind`` in {"ssl", "sl"}."""
    kind = kind.lower()
    if kind == "sl":
        return sl_loss
    if kind == "ssl":
        return lambda cw, feats, labels: ssl_loss(
            cw, feats, labels, alpha_in_gap=alpha_in_gap, detach_adjustment=detach_adjustment
        )
    raise ValueError(f"unknown loss kind {kind!r}; expected 'ssl' or 'sl'")
