"""Semantic-topological graph reasoning over candidate masks.

Nodes are candidate masks carrying their pooled visual features. Edges mix
spatial overlap and feature cosine through a learnable balance::

    E[i, j] = a * IoU(m_i, m_j) + (1 - a) * cos(h_i, h_j),   a = sigmoid(logit)

Each layer runs pre-norm self-attention whose logits receive a per-head
additive edge bias ``gamma_h * E[i, j]``, then pre-norm cross-attention from
nodes to the guidance vectors. Both sub-blocks pass their attention output
through a zero-initialized bottleneck adapter before the residual add.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ArgumentError, ShapeError
from .masks import Mask, iou_matrix, mask_union_all
from .nn import attention, bottleneck, dense, init_bottleneck, init_layernorm, init_linear, mlp_head, norm

EDGE_PRUNE_MIN_NODES = 256


@dataclass
class SelectionResult:
    scores: np.ndarray
    predicted_iou: np.ndarray
    selected: tuple[int, ...]
    merged_mask: Mask
    scene_id: str = ""

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "scores": [float(v) for v in self.scores],
            "predicted_iou": [float(v) for v in self.predicted_iou],
            "selected": [int(i) for i in self.selected],
            "merged_mask": self.merged_mask.to_text(),
        }


def init_graph_params(d_v: int, layers: int = 3, heads: int = 4, adapter_dim: int = 64,
                      seed: int = 0) -> dict[str, Tensor]:
    if d_v % heads:
        raise ShapeError(f"graph heads ({heads}) must divide d_v ({d_v})")
    rng = np.random.default_rng([seed, 0x5768])
    p: dict[str, Tensor] = {}
    p["graph.balance_logit"] = Tensor(np.zeros(()), requires_grad=True, name="graph.balance_logit")
    for layer in range(layers):
        pre = f"graph.layer{layer}"
        init_layernorm(p, f"{pre}.ln1", d_v)
        for proj in ("q", "k", "v", "o"):
            init_linear(p, f"{pre}.msa.{proj}", d_v, d_v, rng)
        p[f"{pre}.msa.gamma"] = Tensor(np.zeros(heads), requires_grad=True, name=f"{pre}.msa.gamma")
        init_bottleneck(p, f"{pre}.adapter1", d_v, adapter_dim, rng)
        init_layernorm(p, f"{pre}.ln2", d_v)
        for proj in ("q", "k", "v", "o"):
            init_linear(p, f"{pre}.mca.{proj}", d_v, d_v, rng)
        init_bottleneck(p, f"{pre}.adapter2", d_v, adapter_dim, rng)
    for head in ("conf", "iou"):
        init_linear(p, f"graph.{head}.fc1", d_v, d_v // 2, rng)
        init_linear(p, f"graph.{head}.fc2", d_v // 2, 1, rng)
    return p


def graph_layers(params: dict) -> int:
    return len({k.split(".")[1] for k in params if k.startswith("graph.layer")})


def graph_heads(params: dict) -> int:
    return params["graph.layer0.msa.gamma"].shape[0] if "graph.layer0.msa.gamma" in params else 1


def build_edges(masks, feats, balance_logit) -> Tensor:
    """Symmetric ``[N, N]`` edge matrix.

    ``masks`` may be a list of :class:`Mask` or a precomputed IoU matrix.
    """
    feats = ag.as_tensor(feats)
    if isinstance(masks, np.ndarray):
        spatial = masks
    else:
        spatial = iou_matrix(list(masks))
    n = spatial.shape[0]
    if n < 1:
        raise ArgumentError("a graph needs at least one node")
    if feats.ndim != 2 or feats.shape[0] != n:
        raise ShapeError(f"features {feats.shape} do not match {n} masks")
    alpha = ag.sigmoid(balance_logit)
    return ag.add(ag.mul(alpha, Tensor(spatial)),
                  ag.mul(ag.sub(1.0, alpha), ag.cosine_matrix(feats)))


def topk_mask(edges: np.ndarray, k: int) -> np.ndarray:
    """Additive logit mask keeping each node's ``k`` strongest neighbours (and itself)."""
    n = edges.shape[0]
    keep = np.zeros((n, n), dtype=bool)
    order = np.argsort(-edges, axis=1, kind="stable")[:, :k]
    keep[np.arange(n)[:, None], order] = True
    keep |= keep.T
    np.fill_diagonal(keep, True)
    return np.where(keep, 0.0, -1e30)


def msa_layer(H, E, params: dict, layer: int, heads: int | None = None, logit_mask=None) -> Tensor:
    """Edge-biased self-attention sub-block with adapter and residual."""
    heads = heads or graph_heads(params)
    pre = f"graph.layer{layer}"
    x = norm(H, params, f"{pre}.ln1")
    bias = ag.head_bias(params[f"{pre}.msa.gamma"], E)
    if logit_mask is not None:
        bias = ag.add(bias, Tensor(np.broadcast_to(logit_mask, bias.shape).copy()))
    att = attention(dense(x, params, f"{pre}.msa.q"), dense(x, params, f"{pre}.msa.k"),
                    dense(x, params, f"{pre}.msa.v"), heads, logit_bias=bias)
    out = dense(att, params, f"{pre}.msa.o")
    out = ag.add(out, bottleneck(out, params, f"{pre}.adapter1"))
    return ag.add(H, out)


def mca_layer(H_hat, guidance, params: dict, layer: int, heads: int | None = None) -> Tensor:
    """Cross-attention from nodes to guidance vectors, with adapter and residual."""
    heads = heads or graph_heads(params)
    guidance = ag.as_tensor(guidance.vectors if hasattr(guidance, "vectors") else guidance)
    if guidance.ndim != 2 or guidance.shape[0] == 0:
        raise ArgumentError("cross-attention needs at least one guidance vector")
    pre = f"graph.layer{layer}"
    x = norm(H_hat, params, f"{pre}.ln2")
    att = attention(dense(x, params, f"{pre}.mca.q"), dense(guidance, params, f"{pre}.mca.k"),
                    dense(guidance, params, f"{pre}.mca.v"), heads)
    out = dense(att, params, f"{pre}.mca.o")
    out = ag.add(out, bottleneck(out, params, f"{pre}.adapter2"))
    return ag.add(H_hat, out)


def reason(feats, spatial: np.ndarray, guidance, params: dict, edge_topk: int | None = None) -> Tensor:
    """Edges once, then ``L`` x (self-attention, cross-attention); returns node states."""
    H = ag.as_tensor(feats)
    E = build_edges(spatial, H, params["graph.balance_logit"])
    mask = None
    if edge_topk is not None and H.shape[0] > EDGE_PRUNE_MIN_NODES:
        mask = topk_mask(E.data, edge_topk)
    heads = graph_heads(params)
    for layer in range(graph_layers(params)):
        H = msa_layer(H, E, params, layer, heads, logit_mask=mask)
        H = mca_layer(H, guidance, params, layer, heads)
    return H


def score_heads(H, params: dict) -> tuple[Tensor, Tensor]:
    """Per-node confidence and predicted IoU, both in (0, 1)."""
    return ag.sigmoid(mlp_head(H, params, "graph.conf")), ag.sigmoid(mlp_head(H, params, "graph.iou"))


def select(candidates: Sequence[Mask], scores: np.ndarray, predicted_iou: np.ndarray,
           tau_sel: float, scene_id: str = "") -> SelectionResult:
    selected = tuple(int(i) for i in np.flatnonzero(scores > tau_sel))
    if selected:
        merged = mask_union_all([candidates[i] for i in selected])
    else:
        merged = Mask.empty(*candidates[0].shape)
    return SelectionResult(np.asarray(scores, dtype=np.float64), np.asarray(predicted_iou, dtype=np.float64),
                           selected, merged, scene_id)


def stgr_forward(scene, params: dict, tau_sel: float = 0.5, guidance=None,
                 edge_topk: int | None = None) -> SelectionResult:
    """Inference on one scene.

    ``guidance`` defaults to the scene's precomputed guidance vectors.
    """
    if guidance is None:
        guidance = scene.guidance
    if guidance is None:
        raise ArgumentError(f"scene {scene.scene_id} carries no guidance vectors")
    with ag.no_tape():
        H = reason(np.asarray(scene.features, dtype=np.float64), iou_matrix(scene.candidates),
                   guidance, params, edge_topk)
        scores, piou = score_heads(H, params)
    return select(scene.candidates, scores.data, piou.data, tau_sel, scene.scene_id)


def count_params(params: dict, by: str = "group") -> dict[str, int]:
    """Parameter counts per group (attention, adapters, heads, balance) or per tensor."""
    if by == "tensor":
        return {name: int(t.size) for name, t in params.items() if name.startswith("graph.")}
    groups = {"attention": 0, "adapters": 0, "heads": 0, "balance": 0}
    for name, t in params.items():
        if not name.startswith("graph."):
            continue
        if name == "graph.balance_logit":
            groups["balance"] += t.size
        elif ".adapter" in name:
            groups["adapters"] += t.size
        elif name.startswith(("graph.conf.", "graph.iou.")):
            groups["heads"] += t.size
        else:
            groups["attention"] += t.size
    groups = {k: int(v) for k, v in groups.items()}
    groups["total"] = sum(groups.values())
    return groups
