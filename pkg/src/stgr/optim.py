"""Parameter registry with freeze accounting, and AdamW on a cosine schedule."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .autograd import Tensor
from .errors import ArgumentError, ContractError

GROUPS = ("backbone-stub", "lora", "adapter", "proj", "stgr")


@dataclass
class Entry:
    tensor: Tensor
    trainable: bool
    group: str


class ParamRegistry:
    """Named parameters, each tagged trainable or frozen and with a group.

    ``virtual_frozen_counts`` declares the sizes of frozen backbones that are
    not materialized; they count toward the denominator of the trainable
    fraction only.
    """

    def __init__(self, virtual_frozen_counts: dict[str, int] | None = None):
        self.entries: dict[str, Entry] = {}
        self.virtual_frozen_counts = dict(virtual_frozen_counts or {})

    def add(self, name: str, tensor: Tensor, trainable: bool, group: str) -> None:
        if group not in GROUPS:
            raise ArgumentError(f"unknown parameter group {group!r}")
        if name in self.entries:
            raise ArgumentError(f"parameter {name!r} registered twice")
        tensor.requires_grad = trainable
        self.entries[name] = Entry(tensor, trainable, group)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self.entries

    def trainable(self) -> dict[str, Tensor]:
        return {k: e.tensor for k, e in self.entries.items() if e.trainable}

    def frozen(self) -> dict[str, Tensor]:
        return {k: e.tensor for k, e in self.entries.items() if not e.trainable}

    def counts(self) -> dict:
        by_group: dict[str, dict[str, int]] = {}
        for e in self.entries.values():
            row = by_group.setdefault(e.group, {"trainable": 0, "frozen": 0})
            row["trainable" if e.trainable else "frozen"] += int(e.tensor.size)
        trainable = sum(r["trainable"] for r in by_group.values())
        frozen = sum(r["frozen"] for r in by_group.values())
        virtual = int(sum(self.virtual_frozen_counts.values()))
        return {
            "by_group": {g: by_group[g] for g in GROUPS if g in by_group},
            "virtual": dict(self.virtual_frozen_counts),
            "trainable": trainable,
            "frozen": frozen,
            "virtual_total": virtual,
            "total": trainable + frozen + virtual,
        }

    def trainable_fraction(self) -> float:
        if not self.entries and not self.virtual_frozen_counts:
            raise ArgumentError("empty registry")
        c = self.counts()
        if c["total"] == 0:
            raise ArgumentError("registry holds no parameters")
        return c["trainable"] / c["total"]

    def serialize(self, frozen: bool = True, group: str | None = None) -> bytes:
        arrays = {k: e.tensor.data for k, e in self.entries.items()
                  if e.trainable != frozen and (group is None or e.group == group)}
        return checkpoint.dumps(arrays)

    def checksum(self, group: str | None = None, frozen: bool = True) -> str:
        return hashlib.sha256(self.serialize(frozen=frozen, group=group)).hexdigest()

    def frozen_checksums(self) -> dict[str, str]:
        groups = sorted({e.group for e in self.entries.values() if not e.trainable})
        return {g: self.checksum(group=g) for g in groups}


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from ``lr0`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps)
    c = 0.5 * (1.0 + math.cos(math.pi * t / total_steps))
    return lr0 * c + lr_min * (1.0 - c)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay on matrix-shaped trainable parameters.

    Vectors and scalars (biases, norm gains, edge-bias scales, the balance
    logit) are never decayed.
    """

    def __init__(self, registry: ParamRegistry, lr: float = 1e-4, total_steps: int = 1,
                 lr_min: float | None = None, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, max_grad_norm: float | None = None):
        self.registry = registry
        self.lr0 = lr
        self.lr_min = lr / 100.0 if lr_min is None else lr_min
        self.total_steps = total_steps
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.state = OptimizerState()
        for name, t in registry.trainable().items():
            self.state.m[name] = np.zeros_like(t.data)
            self.state.v[name] = np.zeros_like(t.data)

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.lr0, self.lr_min)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the learning rate used."""
        entries = self.registry.entries
        for name in grads:
            if name not in entries:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if not entries[name].trainable:
                raise ContractError(f"gradient supplied for frozen parameter {name!r}")
        trainable = self.registry.trainable()
        g_all = {name: grads.get(name) if grads.get(name) is not None else np.zeros_like(t.data)
                 for name, t in trainable.items()}
        if self.max_grad_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in g_all.values()))
            if total > self.max_grad_norm:
                factor = self.max_grad_norm / (total + 1e-12)
                g_all = {k: g * factor for k, g in g_all.items()}

        lr = self.lr_at(self.state.step)
        t = self.state.step + 1
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in trainable.items():
            g = g_all[name]
            m = self.state.m[name]
            v = self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.state.step = t
        return lr
