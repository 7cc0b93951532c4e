"""Pooling, classification heads and losses.

Per-pixel temporal features are reduced by two masked means: over valid time
steps (``temporal_pool``) and over the pixel instances of a parcel
(``mil_pool``). Parcel features go through a projector and a cosine
classifier; dense prediction uses a per-pixel linear head with focal loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError

IGNORE_LABEL = 255


def _masked_mean(x: Tensor, mask, what: str) -> Tensor:
    """Mean of ``x`` (..., L, d) over the L axis restricted to ``mask`` (..., L)."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise DataError(f"{what}: every item needs at least one valid entry")
    weights = (mask / counts[..., None]).astype(x.dtype)
    return (x * weights[..., None]).sum(axis=-2)


def temporal_pool(encoded: Tensor, mask) -> Tensor:
    return _masked_mean(encoded, mask, "temporal_pool")


def mil_pool(per_pixel_features: Tensor, pixel_mask=None) -> Tensor:
    if pixel_mask is None:
        pixel_mask = np.ones(per_pixel_features.shape[:-1], dtype=bool)
    return _masked_mean(per_pixel_features, pixel_mask, "mil_pool")


def _one_hot(labels: np.ndarray, k: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    valid = labels != IGNORE_LABEL
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ContractError(f"labels must lie in [0, {k}) or equal {IGNORE_LABEL}")
    onehot = np.zeros(labels.shape + (k,), dtype=dtype)
    idx = np.where(valid, labels, 0)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot *= valid[..., None]
    return onehot, valid


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over non-ignored positions."""
    onehot, valid = _one_hot(labels, logits.shape[-1], logits.dtype)
    n = max(int(valid.sum()), 1)
    return -(ad.log_softmax(logits, axis=-1) * onehot).sum() * (1.0 / n)


def focal_ce_loss(logits: Tensor, labels, gamma: float = 2.0) -> Tensor:
    """``-(1 - p_y)^gamma log p_y`` averaged over non-ignored positions."""
    if gamma < 0:
        raise ContractError(f"focal gamma must be >= 0, got {gamma}")
    onehot, valid = _one_hot(labels, logits.shape[-1], logits.dtype)
    n = max(int(valid.sum()), 1)
    logp = (ad.log_softmax(logits, axis=-1) * onehot).sum(axis=-1)
    if gamma == 0:
        return -logp.sum() * (1.0 / n)
    weight = ad.power(1.0 - ad.exp(logp), gamma)
    return -(weight * logp * valid.astype(logits.dtype)).sum() * (1.0 / n)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class _Params:
    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ClassifierParams(_Params):
    proj_w1: Tensor  # d x hidden
    proj_b1: Tensor
    proj_norm_gamma: Tensor
    proj_norm_beta: Tensor
    proj_w2: Tensor  # hidden x d_proj
    proj_b2: Tensor
    prototypes: Tensor  # K x d_proj
    scale: Tensor  # (1,)

    @classmethod
    def init(cls, d: int, num_classes: int, rng: np.random.Generator,
             hidden: int = 256, d_proj: int = 128, scale: float = 10.0) -> "ClassifierParams":
        def t(value):
            return Tensor(value, requires_grad=True)

        return cls(
            proj_w1=t(rng.normal(0, 1 / math.sqrt(d), (d, hidden))),
            proj_b1=t(np.zeros(hidden)),
            proj_norm_gamma=t(np.ones(hidden)),
            proj_norm_beta=t(np.zeros(hidden)),
            proj_w2=t(rng.normal(0, 1 / math.sqrt(hidden), (hidden, d_proj))),
            proj_b2=t(np.zeros(d_proj)),
            prototypes=t(rng.normal(0, 1, (num_classes, d_proj))),
            scale=t(np.array([scale])),
        )


@dataclass
class DenseHeadParams(_Params):
    weight: Tensor  # d x K
    bias: Tensor

    @classmethod
    def init(cls, d: int, num_classes: int, rng: np.random.Generator) -> "DenseHeadParams":
        return cls(
            weight=Tensor(rng.normal(0, 1 / math.sqrt(d), (d, num_classes)), requires_grad=True),
            bias=Tensor(np.zeros(num_classes), requires_grad=True),
        )


def projector(x: Tensor, params: ClassifierParams) -> Tensor:
    h = x @ params.proj_w1 + params.proj_b1
    h = ad.gelu(ad.layer_norm(h, params.proj_norm_gamma, params.proj_norm_beta))
    return h @ params.proj_w2 + params.proj_b2


def cosine_logits(feature: Tensor, params: ClassifierParams) -> Tensor:
    """``s * <f/|f|, w_k/|w_k|>`` for every prototype ``w_k``."""
    f = ad.l2_normalize(feature, axis=-1)
    w = ad.l2_normalize(params.prototypes, axis=-1)
    return (f @ w.T) * params.scale


def cosine_softmax_loss(feature: Tensor, label, params: ClassifierParams) -> Tensor:
    """Cross-entropy of the cosine logits. ``feature`` is ``(d_proj,)`` or ``(B, d_proj)``."""
    if feature.ndim == 1:
        feature = feature.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(label))
    if np.any(labels >= params.prototypes.shape[0]) or np.any(labels < 0):
        raise ContractError(f"label out of range for {params.prototypes.shape[0]} classes")
    return cross_entropy(cosine_logits(feature, params), labels)


def dense_head(per_pixel_features: Tensor, params: DenseHeadParams) -> Tensor:
    """Independent linear map per pixel: ``(..., d) -> (..., K)``."""
    return per_pixel_features @ params.weight + params.bias
