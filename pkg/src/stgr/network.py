"""Trainable selector networks: the graph reasoner and the two baseline heads.

All three consume the same prepared scene and return per-candidate
confidence, predicted IoU, and (when the head uses text) the guidance
vectors, so the training loop and evaluation treat them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import RunConfig
from .graph import init_graph_params, reason, score_heads
from .masks import Mask, iou_matrix
from .nn import init_linear
from .optim import ParamRegistry
from .tvid import TextEncoderStub, init_projection, project


@dataclass
class PreparedScene:
    """Per-scene constants computed once and reused every epoch."""

    scene_id: str
    candidates: list[Mask]
    features: np.ndarray
    spatial: np.ndarray
    attributes: np.ndarray
    guidance: np.ndarray | None
    labels: np.ndarray | None
    true_iou: np.ndarray | None

    @property
    def positive(self) -> np.ndarray | None:
        if self.labels is None or not self.labels.any():
            return None
        return self.features[self.labels == 1].mean(axis=0)

    @property
    def negatives(self) -> np.ndarray:
        if self.labels is None:
            return self.features[:0]
        return self.features[self.labels == 0]


def prepare(scene) -> PreparedScene:
    return PreparedScene(
        scene_id=scene.scene_id,
        candidates=list(scene.candidates),
        features=np.asarray(scene.features, dtype=np.float64),
        spatial=iou_matrix(scene.candidates),
        attributes=np.asarray(scene.attributes, dtype=np.float64),
        guidance=None if scene.guidance is None else np.asarray(scene.guidance, dtype=np.float64),
        labels=None if scene.labels is None else np.asarray(scene.labels),
        true_iou=None if scene.true_iou is None else np.asarray(scene.true_iou, dtype=np.float64),
    )


@dataclass
class Outputs:
    scores: Tensor
    predicted_iou: Tensor
    guidance: Tensor | None
    states: Tensor | None = None


class SelectorNetwork:
    """Parameter container plus forward pass for one head variant."""

    def __init__(self, config: RunConfig, head: str | None = None, seed: int | None = None):
        self.config = config
        self.head = head or config.head
        seed = config.seed if seed is None else seed
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.encoder = None
        if self.head in ("stgr", "cosine"):
            if config.use_text_encoder:
                self.encoder = TextEncoderStub(config.d_t, config.text_blocks, config.text_heads,
                                               config.vocab_size, config.lora_rank, config.lora_alpha,
                                               config.lora_dropout, seed=seed)
                self._add(self.encoder.base, "backbone-stub")
                self._add(self.encoder.lora_params(), "lora")
            self._add(init_projection(config.d_t, config.d_v, config.proj_width, seed=seed), "proj")
        if self.head == "stgr":
            graph = init_graph_params(config.d_v, config.graph_layers, config.graph_heads,
                                      config.adapter_dim, seed=seed)
            self._add(graph, lambda name: "adapter" if ".adapter" in name else "stgr")
        else:
            rng = np.random.default_rng([seed, 0xBA5E])
            p: dict[str, Tensor] = {}
            if self.head == "linear":
                init_linear(p, "linear.conf", config.d_v, 1, rng)
                init_linear(p, "linear.iou", config.d_v, 1, rng)
            else:
                p["cosine.scale"] = Tensor(np.full(1, 5.0), requires_grad=True, name="cosine.scale")
                p["cosine.offset"] = Tensor(np.zeros(1), requires_grad=True, name="cosine.offset")
                p["cosine.iou_scale"] = Tensor(np.full(1, 5.0), requires_grad=True, name="cosine.iou_scale")
                p["cosine.iou_offset"] = Tensor(np.zeros(1), requires_grad=True, name="cosine.iou_offset")
            self._add(p, "stgr")

    def _add(self, params: dict, group) -> None:
        for name, t in params.items():
            t.name = name
            self.params[name] = t
            self.groups[name] = group(name) if callable(group) else group

    def registry(self, virtual_frozen_counts: dict | None = None) -> ParamRegistry:
        reg = ParamRegistry(virtual_frozen_counts)
        for name, t in self.params.items():
            reg.add(name, t, self.groups[name] != "backbone-stub", self.groups[name])
        return reg

    # -- forward ----------------------------------------------------------
    def guidance(self, prep: PreparedScene, *, training: bool = False, key=None) -> Tensor:
        if prep.guidance is not None:
            return Tensor(prep.guidance)
        attrs = Tensor(prep.attributes)
        if self.encoder is not None:
            attrs = self.encoder.forward(prep.attributes, training=training, key=key)
        return project(attrs, self.params)

    def forward(self, prep: PreparedScene, *, training: bool = False, key=None) -> Outputs:
        feats = Tensor(prep.features)
        if self.head == "linear":
            conf = ag.reshape(ag.linear(feats, self.params["linear.conf.weight"], self.params["linear.conf.bias"]),
                              (feats.shape[0],))
            piou = ag.reshape(ag.linear(feats, self.params["linear.iou.weight"], self.params["linear.iou.bias"]),
                              (feats.shape[0],))
            return Outputs(ag.sigmoid(conf), ag.sigmoid(piou), None)
        g = self.guidance(prep, training=training, key=key)
        if self.head == "cosine":
            sim = ag.max_(ag.matmul(ag.row_normalize(feats), ag.transpose(ag.row_normalize(g))), axis=1)
            conf = ag.add(ag.mul(sim, self.params["cosine.scale"]), self.params["cosine.offset"])
            piou = ag.add(ag.mul(sim, self.params["cosine.iou_scale"]), self.params["cosine.iou_offset"])
            return Outputs(ag.sigmoid(conf), ag.sigmoid(piou), g)
        H = reason(feats, prep.spatial, g, self.params, self.config.edge_topk)
        scores, piou = score_heads(H, self.params)
        return Outputs(scores, piou, g, H)

    # -- state ------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, arr in arrays.items():
            t = self.params[name]
            if t.data.shape != arr.shape:
                raise KeyError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data[...] = arr
