"""Attention-guided training losses: image enhancement, system suppression, and their sum with LM loss.

All losses accept an ``AttentionTensor`` or a raw array of shape
``(..., L, H, T, T)``; leading batch axes are averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attn_core import AttentionTensor, TokenSegmentation
from .errors import EmptyImageSpan, EmptyQuerySet, EmptySystemSpan, InvalidConfig, NonFiniteInput


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.15
    beta: float = 0.15
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not self.epsilon > 0:
            raise InvalidConfig(f"invalid loss weights {self}")


@dataclass(frozen=True)
class LossBreakdown:
    lm: float
    enhance_img: float
    suppress_sys: float
    total: float


def _batched(A) -> np.ndarray:
    w = A.weights if isinstance(A, AttentionTensor) else np.asarray(A, dtype=np.float64)
    return w.reshape((-1,) + w.shape[-4:])


def _layers(layers, L: int) -> np.ndarray:
    idx = np.arange(L) if layers is None else np.asarray(sorted(set(int(l) for l in layers)), dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= L:
        raise InvalidConfig(f"layer selection {layers} not within [0, {L})")
    return idx


def _query(seg: TokenSegmentation, query_set) -> np.ndarray:
    q = seg.query_set(query_set) if isinstance(query_set, str) else np.asarray(query_set, dtype=np.intp).ravel()
    if q.size == 0:
        raise EmptyQuerySet("query set is empty")
    return q


def _inner_mean(w: np.ndarray, layers: np.ndarray, q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """(1/(|Q||K|)) sum_q sum_k A for every (batch, selected layer, head)."""
    block = w[:, layers][..., q, :][..., keys]
    return block.sum(axis=(-1, -2)) / (q.size * keys.size)


def enhance_img_loss(A, seg: TokenSegmentation, layers=None, query_set="response", epsilon: float = 1e-6) -> float:
    """Negative mean log image-attention mass. The inner mean is clamped at ``epsilon``."""
    img = seg.image
    if img.size == 0:
        raise EmptyImageSpan("image enhancement needs image tokens")
    w = _batched(A)
    m = _inner_mean(w, _layers(layers, w.shape[1]), _query(seg, query_set), img)
    return float(-np.log(np.maximum(m, epsilon)).mean(axis=(1, 2)).mean())


def suppress_sys_loss(A, seg: TokenSegmentation, layers=None, query_set="response", epsilon: float = 1e-6) -> float:
    sys_idx = seg.system
    if sys_idx.size == 0:
        raise EmptySystemSpan("system suppression needs system tokens")
    w = _batched(A)
    m = _inner_mean(w, _layers(layers, w.shape[1]), _query(seg, query_set), sys_idx)
    return float(np.log(m + epsilon).mean(axis=(1, 2)).mean())


def total_loss(lm: float, enhance: float, suppress: float, weights: LossWeights = LossWeights()) -> LossBreakdown:
    if not all(math.isfinite(x) for x in (lm, enhance, suppress)):
        raise NonFiniteInput(f"non-finite loss term: lm={lm} enhance={enhance} suppress={suppress}")
    total = lm + weights.alpha * enhance + weights.beta * suppress
    return LossBreakdown(lm, enhance, suppress, total)


def attention_loss_upstream(A, seg: TokenSegmentation, layers=None, query_set="response",
                            weights: LossWeights = LossWeights()) -> np.ndarray:
    """dL/dA of alpha * enhance + beta * suppress, same shape as ``A``'s weights."""
    raw = A.weights if isinstance(A, AttentionTensor) else np.asarray(A, dtype=np.float64)
    w = _batched(raw)
    B, L, H, T, _ = w.shape
    sel = _layers(layers, L)
    q = _query(seg, query_set)
    grad = np.zeros_like(w)
    eps = weights.epsilon
    # every term is averaged over batch, selected layers and heads
    norm = B * sel.size * H
    qq = q[:, None]
    if weights.alpha:
        img = seg.image
        if img.size == 0:
            raise EmptyImageSpan("image enhancement needs image tokens")
        m = _inner_mean(w, sel, q, img)
        coef = np.where(m > eps, -weights.alpha / (norm * np.where(m > eps, m, 1.0) * q.size * img.size), 0.0)
        for i, l in enumerate(sel):
            grad[:, l][:, :, qq, img] += coef[:, i][:, :, None, None]
    if weights.beta:
        sys_idx = seg.system
        if sys_idx.size == 0:
            raise EmptySystemSpan("system suppression needs system tokens")
        m = _inner_mean(w, sel, q, sys_idx)
        coef = weights.beta / (norm * (m + eps) * q.size * sys_idx.size)
        for i, l in enumerate(sel):
            grad[:, l][:, :, qq, sys_idx] += coef[:, i][:, :, None, None]
    return grad.reshape(raw.shape)


def image_attention_mass(A, seg: TokenSegmentation, query_set="response") -> float:
    """Mean over batch, layers, heads and queries of the attention mass on image keys."""
    w = _batched(A)
    q = _query(seg, query_set)
    return float(w[..., q, :][..., seg.image].sum(axis=-1).mean())
