"""Estimator wrapper so selector heads plug into fit/predict tooling."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autograd import no_tape
from .config import RunConfig
from .errors import ArgumentError, ShapeError, ValidationError
from .graph import SelectionResult, select
from .metrics import dsc, reference_mask
from .network import SelectorNetwork, prepare
from .training import train_loop


def check_config(config) -> RunConfig:
    if config is None:
        return RunConfig()
    if isinstance(config, RunConfig):
        return config
    if isinstance(config, dict):
        return RunConfig.from_dict(config)
    raise ArgumentError(f"config must be a RunConfig or dict, got {type(config).__name__}")


def check_scenes(scenes, d_v: int | None = None, *, require_labels: bool = False,
                 match_threshold: float = 0.5) -> list:
    """Validate a scene collection and return it as a list.

    Scenes lacking labels get them derived from their ground truth when
    ``require_labels`` is set; inputs are never mutated.
    """
    if scenes is None or isinstance(scenes, (str, bytes)):
        raise ArgumentError("expected a sequence of scenes")
    scenes = list(scenes)
    if not scenes:
        raise ArgumentError("no scenes given")
    out = []
    for s in scenes:
        if not hasattr(s, "candidates") or not hasattr(s, "features"):
            raise ArgumentError(f"not a scene: {type(s).__name__}")
        s.validate()
        if d_v is not None and s.features.shape[1] != d_v:
            raise ShapeError(f"scene {s.scene_id}: feature width {s.features.shape[1]}, expected {d_v}")
        if require_labels and (s.labels is None or s.true_iou is None):
            s = s.with_labels(match_threshold)
        out.append(s)
    ids = [s.scene_id for s in out]
    if len(set(ids)) != len(ids):
        raise ValidationError("scene ids must be unique")
    return out


class MaskSelector(BaseEstimator):
    """Scores candidate masks against attribute guidance and merges the selected ones.

    Parameters
    ----------
    head : {"stgr", "linear", "cosine"}
    config : RunConfig or dict, optional
        Hyperparameters; ``head``, ``seed`` and ``threads`` given here win.
    seed : int, optional
    threads : int, default 1
    """

    def __init__(self, head: str = "stgr", config=None, seed: int | None = None, threads: int = 1):
        self.head = head
        self.config = config
        self.seed = seed
        self.threads = threads

    def effective_config(self) -> RunConfig:
        cfg = check_config(self.config)
        changes = {"head": self.head, "threads": self.threads}
        if self.seed is not None:
            changes["seed"] = self.seed
        return cfg.replace(**changes)

    def fit(self, scenes, y=None, out_dir=None):
        cfg = self.effective_config()
        scenes = check_scenes(scenes, cfg.d_v, require_labels=True, match_threshold=cfg.match_threshold)
        result = train_loop(scenes, cfg, out_dir=out_dir)
        self.config_ = cfg
        self.network_ = result.network
        self.registry_ = result.registry
        self.train_log_ = result.log
        self.n_features_in_ = cfg.d_v
        return self

    @classmethod
    def from_network(cls, network: SelectorNetwork) -> "MaskSelector":
        cfg = network.config
        est = cls(head=network.head, config=cfg, seed=cfg.seed, threads=cfg.threads)
        est.config_ = cfg.replace(head=network.head)
        est.network_ = network
        est.registry_ = network.registry(cfg.virtual_backbones)
        est.train_log_ = []
        est.n_features_in_ = cfg.d_v
        return est

    def _outputs(self, scenes):
        check_is_fitted(self, "network_")
        scenes = check_scenes(scenes, self.n_features_in_)
        with no_tape():
            for s in scenes:
                yield s, self.network_.forward(prepare(s), training=False)

    def predict(self, scenes) -> list[SelectionResult]:
        check_is_fitted(self, "network_")
        tau = self.config_.tau_sel
        return [select(s.candidates, o.scores.data, o.predicted_iou.data, tau, s.scene_id)
                for s, o in self._outputs(scenes)]

    def predict_proba(self, scenes) -> list[np.ndarray]:
        """Per-candidate selection confidence for each scene."""
        return [o.scores.data.copy() for _, o in self._outputs(scenes)]

    def transform(self, scenes) -> list[np.ndarray]:
        """Refined node states (raw features for heads without a graph)."""
        return [(o.states.data if o.states is not None else s.features).copy()
                for s, o in self._outputs(scenes)]

    def score(self, scenes, y=None) -> float:
        """Mean Dice of merged selections against each scene's lesion union."""
        scenes = list(scenes)
        preds = self.predict(scenes)
        return float(np.mean([dsc(p.merged_mask, reference_mask(s)) for p, s in zip(preds, scenes)]))


def fit_selector(scenes: Sequence, config: RunConfig, head: str | None = None) -> MaskSelector:
    return MaskSelector(head=head or config.head, config=config, threads=config.threads).fit(scenes)
