"""Layer building blocks shared by the text encoder and the graph reasoner.

Parameters live in flat ``{name: Tensor}`` dicts; these helpers take the
dict plus a name prefix so the same code serves every layer instance.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def init_linear(params: dict, prefix: str, d_in: int, d_out: int, rng, *, bias: bool = True,
                std: float | None = None, zero: bool = False, requires_grad: bool = True) -> None:
    std = 1.0 / math.sqrt(d_in) if std is None else std
    w = np.zeros((d_in, d_out)) if zero else rng.standard_normal((d_in, d_out)) * std
    params[f"{prefix}.weight"] = Tensor(w, requires_grad=requires_grad, name=f"{prefix}.weight")
    if bias:
        params[f"{prefix}.bias"] = Tensor(np.zeros(d_out), requires_grad=requires_grad, name=f"{prefix}.bias")


def init_layernorm(params: dict, prefix: str, d: int, *, requires_grad: bool = True) -> None:
    params[f"{prefix}.gain"] = Tensor(np.ones(d), requires_grad=requires_grad, name=f"{prefix}.gain")
    params[f"{prefix}.bias"] = Tensor(np.zeros(d), requires_grad=requires_grad, name=f"{prefix}.bias")


def dense(x, params: dict, prefix: str) -> Tensor:
    return ag.linear(x, params[f"{prefix}.weight"], params.get(f"{prefix}.bias"))


def norm(x, params: dict, prefix: str, eps: float = 1e-5) -> Tensor:
    return ag.layernorm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return ag.transpose(ag.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return ag.reshape(ag.transpose(x, (1, 0, 2)), (n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, logit_bias=None) -> Tensor:
    """Multi-head scaled dot-product attention over row sets.

    ``q`` is ``[Nq, d]``, ``k``/``v`` are ``[Nk, d]``; ``logit_bias`` (if any)
    is added to the ``[heads, Nq, Nk]`` logits before the softmax.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    dh = q.shape[1] // heads
    logits = ag.scale(ag.matmul(qh, ag.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if logit_bias is not None:
        logits = ag.add(logits, logit_bias)
    return merge_heads(ag.matmul(ag.softmax(logits, axis=-1), vh))


def bottleneck(x, params: dict, prefix: str) -> Tensor:
    """down-project, GELU, up-project (no residual; callers add it)."""
    return dense(ag.gelu(dense(x, params, f"{prefix}.down")), params, f"{prefix}.up")


def init_bottleneck(params: dict, prefix: str, d: int, width: int, rng) -> None:
    init_linear(params, f"{prefix}.down", d, width, rng, std=0.02)
    # zero up-projection: the adapter starts as an exact no-op
    init_linear(params, f"{prefix}.up", width, d, rng, zero=True)


def mlp_head(x, params: dict, prefix: str) -> Tensor:
    """Two-layer GELU MLP emitting one logit per row, shape ``[N]``."""
    out = dense(ag.gelu(dense(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")
    return ag.reshape(out, (x.shape[0],))
