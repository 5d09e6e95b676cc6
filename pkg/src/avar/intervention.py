"""Training-free reallocation of attention away from system keys."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attn_core import AttentionTensor, TokenSegmentation
from .errors import EmptyImageSpan, EmptySystemSpan, InvalidGamma

PROPORTIONAL = "proportional"
IMAGE_ONLY = "image_only"


@dataclass(frozen=True)
class InterventionConfig:
    gamma: float = 0.5
    layers: tuple[int, ...] | None = None  # None means every layer
    mode: str = PROPORTIONAL
    apply_at: str = "post-softmax"

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise InvalidGamma(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.mode not in (PROPORTIONAL, IMAGE_ONLY):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.apply_at != "post-softmax":
            raise ValueError("only post-softmax application is supported")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))

    def selects(self, layer: int) -> bool:
        return self.layers is None or layer in self.layers


def reallocate_rows(rows: np.ndarray, seg: TokenSegmentation, gamma: float,
                    mode: str = PROPORTIONAL, causal: bool = False) -> np.ndarray:
    """Scale system-key entries by ``gamma`` and give the freed mass back.

    ``rows`` may have any leading shape; the last axis indexes keys. In
    image-only mode with ``causal`` set, the last two axes must be query x key
    so freed mass only lands on image keys the query can see.
    """
    if not (0 < gamma <= 1):
        raise InvalidGamma(f"gamma must lie in (0, 1], got {gamma}")
    sys_idx = seg.system
    if sys_idx.size == 0:
        raise EmptySystemSpan("reallocation needs a non-empty system span")
    if gamma == 1:
        return np.array(rows, copy=True)
    out = np.array(rows, dtype=np.float64, copy=True)
    if mode == PROPORTIONAL:
        out[..., sys_idx] *= gamma
        total = out.sum(axis=-1, keepdims=True)
        safe = total > 0
        return np.where(safe, out / np.where(safe, total, 1.0), rows)
    img_idx = seg.image
    if img_idx.size == 0:
        raise EmptyImageSpan("image-only reallocation needs image tokens")
    if causal:
        T = out.shape[-1]
        visible = np.tril(np.ones((T, T), dtype=bool))[:, img_idx]
    else:
        visible = np.ones(img_idx.size, dtype=bool)
    img = out[..., img_idx]
    img_mass = img.sum(axis=-1, keepdims=True)
    n_vis = visible.sum(axis=-1, keepdims=True)
    even = np.where(visible, 1.0 / np.maximum(n_vis, 1), 0.0)
    share = np.where(img_mass > 0, img / np.where(img_mass > 0, img_mass, 1.0), even)
    can_take = (img_mass > 0) | (n_vis > 0)
    freed = (1 - gamma) * out[..., sys_idx].sum(axis=-1, keepdims=True)
    out[..., sys_idx] *= gamma
    out[..., img_idx] = img + freed * share
    # rows with no visible image key fall back to proportional renormalisation
    fallback = reallocate_rows(rows, seg, gamma, PROPORTIONAL)
    return np.where(can_take, out, fallback)


def reallocate(A: AttentionTensor, seg: TokenSegmentation, cfg: InterventionConfig) -> AttentionTensor:
    if cfg.gamma == 1:
        return AttentionTensor(A.weights.copy(), causal=A.causal, meta=dict(A.meta))
    w = A.weights.copy()
    for l in range(A.layers):
        if cfg.selects(l):
            w[l] = reallocate_rows(A.weights[l], seg, cfg.gamma, cfg.mode, A.causal)
    return AttentionTensor(w, causal=A.causal, meta=dict(A.meta))
