"""Text-side intent distillation at desk scale.

A small frozen attention stack stands in for the large language model. Its
attention projections carry trainable low-rank adapters, and a two-layer
GELU projection maps each attribute's latent vector into the visual feature
space where it becomes a guidance vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ArgumentError, ConfigError, ShapeError
from .nn import dense, init_layernorm, init_linear, merge_heads, norm, split_heads

_PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class AttributeVector:
    values: np.ndarray
    attribute_id: int


@dataclass(frozen=True)
class GuidanceSet:
    vectors: np.ndarray  # [K, d_v]

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ArgumentError("a guidance set needs at least one vector")

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


class LowRankAdapter:
    """Additive update ``scaling * down @ up`` on a frozen ``[d_in, d_out]`` weight.

    ``down`` starts as small Gaussian noise and ``up`` as zeros, so the
    update is exactly zero until the first optimizer step.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout_rate: float,
                 rng, name: str = "lora"):
        self.rank = rank
        self.alpha = alpha
        self.dropout_rate = dropout_rate
        self.down = Tensor(rng.standard_normal((d_in, rank)) * 0.02, requires_grad=True, name=f"{name}.lora_down")
        self.up = Tensor(np.zeros((rank, d_out)), requires_grad=True, name=f"{name}.lora_up")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.down.data @ self.up.data)

    def __call__(self, x, *, training: bool = False, key=None) -> Tensor:
        x = ag.dropout(x, self.dropout_rate, key=key, training=training)
        return ag.scale(ag.matmul(ag.matmul(x, self.down), self.up), self.scaling)


class TextEncoderStub:
    """Frozen token-level attention stack with LoRA on q/k/v/o projections.

    Inputs are either integer token sequences (embedded through the frozen
    table) or real attribute vectors, which enter as a soft token after a
    frozen ``[CLS]`` embedding. Each sequence is mean-pooled to one vector.
    """

    def __init__(self, d_t: int = 32, blocks: int = 2, heads: int = 4, vocab_size: int = 64,
                 rank: int = 16, alpha: float = 32.0, dropout_rate: float = 0.05, seed: int = 0):
        if d_t % heads:
            raise ConfigError(f"text heads ({heads}) must divide d_t ({d_t})")
        self.d_t, self.blocks, self.heads, self.vocab_size = d_t, blocks, heads, vocab_size
        rng = np.random.default_rng([seed, 0x7E47])
        base: dict[str, Tensor] = {}
        # row ``vocab_size`` is the [CLS] token
        base["text.embed"] = Tensor(rng.standard_normal((vocab_size + 1, d_t)), name="text.embed")
        self.adapters: dict[str, LowRankAdapter] = {}
        for b in range(blocks):
            p = f"text.block{b}"
            init_layernorm(base, f"{p}.ln1", d_t, requires_grad=False)
            for proj in _PROJECTIONS:
                init_linear(base, f"{p}.attn.{proj}", d_t, d_t, rng, requires_grad=False)
                base[f"{p}.attn.{proj}.bias"].data[:] = rng.standard_normal(d_t) * 0.02
                self.adapters[f"{p}.attn.{proj}"] = LowRankAdapter(
                    d_t, d_t, rank, alpha, dropout_rate, rng, name=f"{p}.attn.{proj}")
            init_layernorm(base, f"{p}.ln2", d_t, requires_grad=False)
            init_linear(base, f"{p}.mlp.fc1", d_t, 2 * d_t, rng, requires_grad=False)
            init_linear(base, f"{p}.mlp.fc2", 2 * d_t, d_t, rng, requires_grad=False)
        self.base = base

    def lora_params(self) -> dict[str, Tensor]:
        out = {}
        for site, ad in self.adapters.items():
            out[f"{site}.lora_down"] = ad.down
            out[f"{site}.lora_up"] = ad.up
        return out

    def params(self) -> dict[str, Tensor]:
        return {**self.base, **self.lora_params()}

    def _project(self, x, site: str, training: bool, key) -> Tensor:
        out = dense(x, self.base, site)
        ad = self.adapters[site]
        site_key = None if key is None else (*key, _site_id(site))
        return ag.add(out, ad(x, training=training, key=site_key))

    def _embed(self, inputs) -> tuple[Tensor, list[int]]:
        table = self.base["text.embed"]
        if isinstance(inputs, np.ndarray) and inputs.dtype.kind == "f" or isinstance(inputs, Tensor):
            vecs = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
            if vecs.ndim != 2 or vecs.shape[1] != self.d_t:
                raise ShapeError(f"attribute vectors must be [K, {self.d_t}], got {vecs.shape}")
            k = vecs.shape[0]
            cls_rows = np.full(k, self.vocab_size)
            cls = ag.take(table, cls_rows)
            # interleave [CLS_0, v_0, CLS_1, v_1, ...]
            stacked = ag.reshape(ag.concat([cls, vecs], axis=1), (2 * k, self.d_t))
            return stacked, [2] * k
        seqs = [np.asarray(s, dtype=np.int64) for s in inputs]
        if any(s.ndim != 1 or s.size == 0 for s in seqs):
            raise ArgumentError("token sequences must be non-empty 1-D integer arrays")
        ids = np.concatenate(seqs)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ArgumentError(f"token ids must lie in [0, {self.vocab_size})")
        return ag.take(table, ids), [len(s) for s in seqs]

    def forward(self, inputs, *, training: bool = False, key=None) -> Tensor:
        """Encode K inputs to a ``[K, d_t]`` tensor of latent attribute vectors."""
        if len(inputs) == 0:
            raise ArgumentError("at least one attribute is required")
        x, lengths = self._embed(inputs)
        total = sum(lengths)
        seg = np.repeat(np.arange(len(lengths)), lengths)
        # block-diagonal mask keeps each attribute's tokens separate
        mask = np.where(seg[:, None] == seg[None, :], 0.0, -1e30)
        mask = Tensor(np.broadcast_to(mask, (self.heads, total, total)).copy())
        dh = self.d_t // self.heads
        for b in range(self.blocks):
            p = f"text.block{b}"
            h = norm(x, self.base, f"{p}.ln1")
            q = split_heads(self._project(h, f"{p}.attn.q", training, key), self.heads)
            k = split_heads(self._project(h, f"{p}.attn.k", training, key), self.heads)
            v = split_heads(self._project(h, f"{p}.attn.v", training, key), self.heads)
            logits = ag.add(ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh)), mask)
            att = merge_heads(ag.matmul(ag.softmax(logits, axis=-1), v))
            x = ag.add(x, self._project(att, f"{p}.attn.o", training, key))
            h2 = norm(x, self.base, f"{p}.ln2")
            x = ag.add(x, dense(ag.gelu(dense(h2, self.base, f"{p}.mlp.fc1")), self.base, f"{p}.mlp.fc2"))
        pool = np.zeros((len(lengths), total))
        pool[seg, np.arange(total)] = 1.0 / np.asarray(lengths, dtype=np.float64)[seg]
        return ag.matmul(Tensor(pool), x)


def _site_id(site: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(site)) & 0xFFFFFFF


def encode_attributes(tokenized_instruction: Sequence, encoder: TextEncoderStub) -> list[AttributeVector]:
    """Eval-mode encoding of K attribute token sequences."""
    if len(tokenized_instruction) == 0:
        raise ArgumentError("empty attribute list")
    with ag.no_tape():
        out = encoder.forward(tokenized_instruction, training=False).data
    return [AttributeVector(out[i].copy(), i) for i in range(out.shape[0])]


def init_projection(d_t: int, d_v: int, hidden: int | None = None, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0x960])
    params: dict[str, Tensor] = {}
    init_linear(params, "proj.fc1", d_t, hidden or 2 * d_v, rng)
    init_linear(params, "proj.fc2", hidden or 2 * d_v, d_v, rng)
    return params


def project(attrs, params: dict[str, Tensor]) -> Tensor:
    """Tape-aware projection of a ``[K, d_t]`` tensor to ``[K, d_v]``."""
    return dense(ag.gelu(dense(attrs, params, "proj.fc1")), params, "proj.fc2")


def project_guidance(attrs: Sequence[AttributeVector], proj_params: dict[str, Tensor],
                     d_v: int | None = None) -> GuidanceSet:
    if not attrs:
        raise ArgumentError("no attribute vectors to project")
    mat = np.stack([np.asarray(a.values, dtype=np.float64) for a in attrs])
    d_t = proj_params["proj.fc1.weight"].shape[0]
    if mat.shape[1] != d_t:
        raise ConfigError(f"attribute dimension {mat.shape[1]} != projection input {d_t}")
    out_dim = proj_params["proj.fc2.weight"].shape[1]
    if d_v is not None and out_dim != d_v:
        raise ConfigError(f"projection emits {out_dim}-d vectors but d_v is {d_v}")
    with ag.no_tape():
        return GuidanceSet(project(Tensor(mat), proj_params).data.copy())
