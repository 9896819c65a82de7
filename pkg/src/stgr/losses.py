"""Selection cross-entropy, guidance/feature InfoNCE, IoU regression, and their sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ArgumentError, ConfigError, NumericDomainError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    nce: float = 0.5
    reg: float = 0.5
    tau_nce: float = 0.07

    def __post_init__(self):
        if min(self.ce, self.nce, self.reg) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau_nce <= 0:
            raise ConfigError("InfoNCE temperature must be positive")


def selection_ce_loss(scores, labels, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of per-candidate probabilities."""
    scores = ag.as_tensor(scores)
    y = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    if scores.size == 0:
        raise ArgumentError("no candidates to score")
    p = ag.clip(scores, eps, 1.0 - eps)
    ll = ag.add(ag.mul(ag.log(p), Tensor(y)), ag.mul(ag.log(ag.sub(1.0, p)), Tensor(1.0 - y)))
    return ag.scale(ag.sum_(ll), -1.0 / scores.size)


def info_nce_loss(guidance, pos_feats, neg_feats, tau_nce: float = 0.07) -> Tensor:
    """Mean over attributes of ``-log softmax`` of the positive logit.

    ``pos_feats`` is one positive vector ``[d]`` shared by all attributes or
    one per attribute ``[K, d]``; ``neg_feats`` is ``[M, d]`` with ``M >= 0``.
    """
    if tau_nce <= 0:
        raise ConfigError(f"tau_nce must be positive, got {tau_nce}")
    g = ag.as_tensor(guidance.vectors if hasattr(guidance, "vectors") else guidance)
    k, d = g.shape
    pos = pos_feats if isinstance(pos_feats, Tensor) else np.asarray(pos_feats, dtype=np.float64)
    if pos.ndim == 1:
        pos = np.tile(pos, (k, 1))
    if tuple(pos.shape) != (k, d):
        raise ShapeError(f"positive features {pos.shape} do not match guidance {g.shape}")
    pos_logit = ag.sum_(ag.mul(g, pos), axis=1, keepdims=True)
    neg = np.asarray(neg_feats, dtype=np.float64).reshape(-1, d) if not isinstance(neg_feats, Tensor) else neg_feats
    if neg.shape[0]:
        logits = ag.concat([pos_logit, ag.matmul(g, ag.transpose(neg))], axis=1)
    else:
        logits = pos_logit
    logits = ag.scale(logits, 1.0 / tau_nce)
    per_attr = ag.sub(ag.logsumexp(logits, axis=1), ag.reshape(ag.take(logits, (slice(None), 0)), (k,)))
    return ag.mean(per_attr)


def iou_regression_loss(predicted_iou, true_iou) -> Tensor:
    pred = ag.as_tensor(predicted_iou)
    true = np.asarray(true_iou, dtype=np.float64)
    if pred.shape != true.shape:
        raise ShapeError(f"predicted IoU {pred.shape} vs true IoU {true.shape}")
    return ag.mean(ag.smooth_l1(ag.sub(pred, Tensor(true))))


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    """Weighted sum on one tape. ``parts`` maps ``ce``/``nce``/``reg`` to scalars."""
    total = None
    for term, w in (("ce", weights.ce), ("nce", weights.nce), ("reg", weights.reg)):
        part = parts.get(term)
        if part is None:
            continue
        part = ag.as_tensor(part)
        if not np.all(np.isfinite(part.data)):
            raise NumericDomainError(f"loss term {term!r} is not finite")
        scaled = ag.scale(part, w)
        total = scaled if total is None else ag.add(total, scaled)
    return total if total is not None else Tensor(0.0)
