"""Composite-loss training under the frozen/adapter parameter split."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .autograd import Tape
from .config import RunConfig
from .errors import ArgumentError, NumericDomainError
from .labels import label_candidates
from .losses import LossWeights, info_nce_loss, iou_regression_loss, selection_ce_loss, total_loss
from .network import PreparedScene, SelectorNetwork, prepare
from .optim import AdamW, ParamRegistry
from .synth import derive_seed

log = logging.getLogger(__name__)

__all__ = ["label_candidates", "train_loop", "scene_loss", "TrainingAborted", "TrainResult",
           "weights_from_config", "save_network", "load_network"]


class TrainingAborted(NumericDomainError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainResult:
    network: SelectorNetwork
    registry: ParamRegistry
    optimizer: AdamW
    log: list[dict] = field(default_factory=list)
    frozen_checksums_start: dict = field(default_factory=dict)
    frozen_checksums_end: dict = field(default_factory=dict)


def weights_from_config(cfg: RunConfig) -> LossWeights:
    return LossWeights(cfg.lambda_ce, cfg.lambda_nce, cfg.lambda_reg, cfg.tau_nce)


def scene_loss(network: SelectorNetwork, prep: PreparedScene, weights: LossWeights, *,
               training: bool = False, key=None, ce_eps: float = 1e-7):
    """Forward one scene on the active tape; returns ``(total, parts)``."""
    if prep.labels is None or prep.true_iou is None:
        raise ArgumentError(f"scene {prep.scene_id} has no labels")
    out = network.forward(prep, training=training, key=key)
    parts = {
        "ce": selection_ce_loss(out.scores, prep.labels, ce_eps),
        "reg": iou_regression_loss(out.predicted_iou, prep.true_iou),
    }
    pos = prep.positive
    # scenes without positives contribute no contrastive term
    if out.guidance is not None and pos is not None:
        parts["nce"] = info_nce_loss(out.guidance, pos, prep.negatives, weights.tau_nce)
    return total_loss(parts, weights), parts


def _scene_grads(network, prep, weights, names, tensors, key, ce_eps):
    try:
        with Tape() as tape:
            loss, parts = scene_loss(network, prep, weights, training=True, key=key, ce_eps=ce_eps)
    except NumericDomainError as exc:
        return {"total": math.nan, "error": str(exc)}, None
    values = {k: float(v.data) for k, v in parts.items()}
    values["total"] = float(loss.data)
    if not all(math.isfinite(v) for v in values.values()):
        return values, None
    grads = tape.gradients(loss, tensors)
    return values, dict(zip(names, grads))


def train_loop(scenes: Sequence, config: RunConfig, network: SelectorNetwork | None = None,
               out_dir=None, prepared: Sequence[PreparedScene] | None = None) -> TrainResult:
    """Train ``network`` (fresh from ``config`` if omitted) on labelled scenes.

    Shuffling, dropout, and initialization are all keyed to ``config.seed``,
    and per-scene gradients are reduced in batch order, so results do not
    depend on ``config.threads``.
    """
    if not scenes and not prepared:
        raise ArgumentError("training set is empty")
    cfg = config
    network = network or SelectorNetwork(cfg)
    preps = list(prepared) if prepared is not None else [prepare(s) for s in scenes]
    registry = network.registry(cfg.virtual_backbones)
    n = len(preps)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    optimizer = AdamW(registry, lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch, lr_min=cfg.lr_floor,
                      betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                      max_grad_norm=cfg.max_grad_norm)
    weights = weights_from_config(cfg)
    trainable = registry.trainable()
    names, tensors = list(trainable), list(trainable.values())
    fraction = registry.trainable_fraction()
    result = TrainResult(network, registry, optimizer, frozen_checksums_start=registry.frozen_checksums())
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(derive_seed(cfg.seed, 1_000_003 + epoch)).permutation(n)
            sums = {"total": 0.0, "ce": 0.0, "nce": 0.0, "reg": 0.0}
            lr = optimizer.lr_at(optimizer.state.step)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                step = optimizer.state.step
                jobs = [(preps[i], (cfg.seed, step, int(i))) for i in batch]
                run = lambda job: _scene_grads(network, job[0], weights, names, tensors,  # noqa: E731
                                               job[1], cfg.ce_eps)
                results = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
                for (prep, _), (values, _g) in zip(jobs, results):
                    if _g is None:
                        dump = {"epoch": epoch, "step": step, "scene": prep.scene_id, "losses": values,
                                "batch": [preps[i].scene_id for i in batch]}
                        if out_dir is not None:
                            checkpoint.atomic_write(Path(out_dir) / "abort_dump.json",
                                                    json.dumps(dump, indent=2, default=str) + "\n")
                        raise TrainingAborted(f"non-finite loss in scene {prep.scene_id} "
                                              f"(epoch {epoch}, step {step}): {values}", dump)
                grads = {}
                for name in names:
                    acc = None
                    for _values, g in results:
                        if g[name] is not None:
                            acc = g[name].copy() if acc is None else acc + g[name]
                    if acc is not None:
                        grads[name] = acc / len(batch)
                lr = optimizer.step(grads)
                for values, _g in results:
                    for k in sums:
                        sums[k] += values.get(k, 0.0)
            record = {"epoch": epoch, "loss": sums["total"] / n, "ce": sums["ce"] / n,
                      "nce": sums["nce"] / n, "reg": sums["reg"] / n, "lr": lr,
                      "trainable_fraction": fraction}
            result.log.append(record)
            log.debug("epoch %d loss %.6f", epoch, record["loss"])
    finally:
        if pool:
            pool.shutdown()
    result.frozen_checksums_end = registry.frozen_checksums()
    if out_dir is not None:
        write_training_outputs(result, cfg, out_dir)
    return result


def write_training_outputs(result: TrainResult, cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    save_network(result.network, out / "checkpoint.ckpt")
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.log)
    checkpoint.atomic_write(out / "train_log.jsonl", lines)
    checkpoint.atomic_write(out / "effective_config.json", cfg.to_json())


def save_network(network: SelectorNetwork, path) -> Path:
    meta = {"head": network.head, "config": network.config.to_dict()}
    return checkpoint.save(path, network.state_dict(), seed=network.config.seed, meta=meta)


def load_network(path) -> SelectorNetwork:
    arrays, seed, meta = checkpoint.load(path)
    cfg = RunConfig.from_dict(meta["config"])
    net = SelectorNetwork(cfg, head=meta.get("head"))
    net.load_state_dict(arrays)
    return net
