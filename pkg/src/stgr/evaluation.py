"""Cross-validated evaluation of selector heads and report emission."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import clone
from sklearn.model_selection import KFold

from . import checkpoint
from .config import RunConfig
from .errors import ArgumentError, STGRError
from .estimator import MaskSelector, check_scenes
from .metrics import dsc, iou_metric, reference_mask
from .synth import derive_seed
from .training import TrainingAborted

log = logging.getLogger(__name__)

HEAD_ALIASES = {"cosine-threshold": "cosine"}
FOLD_SEED_OFFSET = 2_000_003
TABLE_COLUMNS = ("head", "fold", "IoU_mean", "DSC_mean", "n_scenes")


def canonical_head(head: str) -> str:
    return HEAD_ALIASES.get(head, head)


def kfold_split(scene_ids: Sequence[str], k: int = 5, seed: int = 0) -> list[list[str]]:
    """Shuffle ``scene_ids`` by ``seed`` and cut them into ``k`` near-equal folds."""
    ids = list(scene_ids)
    if k < 2:
        raise ArgumentError(f"need k >= 2 folds, got {k}")
    if len(ids) < k:
        raise ArgumentError(f"cannot split {len(ids)} scenes into {k} folds")
    if len(set(ids)) != len(ids):
        raise ArgumentError("scene ids must be unique")
    splitter = KFold(n_splits=k, shuffle=True, random_state=derive_seed(seed, 0) % 2**32)
    return [[ids[i] for i in sorted(test)] for _, test in splitter.split(ids)]


@dataclass
class FoldReport:
    head: str
    fold: int
    scene_ids: list[str]
    iou: list[float]
    dsc: list[float]
    n_train: int = 0
    n_selected: list[int] = field(default_factory=list)

    @property
    def n_scenes(self) -> int:
        return len(self.scene_ids)

    @property
    def iou_mean(self) -> float:
        return float(np.mean(self.iou)) if self.iou else 0.0

    @property
    def dsc_mean(self) -> float:
        return float(np.mean(self.dsc)) if self.dsc else 0.0

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "fold": self.fold,
            "n_scenes": self.n_scenes,
            "n_train": self.n_train,
            "IoU_mean": self.iou_mean,
            "DSC_mean": self.dsc_mean,
            "scenes": [{"scene_id": s, "IoU": i, "DSC": d, "n_selected": n}
                       for s, i, d, n in zip(self.scene_ids, self.iou, self.dsc, self.n_selected)],
        }


@dataclass
class CVResult:
    head: str
    folds: list[FoldReport]

    def _stat(self, attr: str):
        vals = [getattr(f, attr) for f in self.folds]
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return float(np.mean(vals)), std

    @property
    def dsc_mean(self) -> float:
        return self._stat("dsc_mean")[0]

    @property
    def dsc_std(self) -> float:
        return self._stat("dsc_mean")[1]

    @property
    def iou_mean(self) -> float:
        return self._stat("iou_mean")[0]

    @property
    def iou_std(self) -> float:
        return self._stat("iou_mean")[1]

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": {"IoU_mean": self.iou_mean, "IoU_std": self.iou_std,
                          "DSC_mean": self.dsc_mean, "DSC_std": self.dsc_std,
                          "n_scenes": sum(f.n_scenes for f in self.folds)},
        }


def evaluate_scenes(selector: MaskSelector, scenes: Sequence, head: str | None = None,
                    fold: int = 0, n_train: int = 0) -> FoldReport:
    """Per-scene IoU and Dice of the merged selection against the lesion union."""
    scenes = list(scenes)
    preds = selector.predict(scenes)
    report = FoldReport(head or selector.head, fold, [], [], [], n_train)
    for s, p in zip(scenes, preds):
        ref = reference_mask(s)
        report.scene_ids.append(s.scene_id)
        report.iou.append(iou_metric(p.merged_mask, ref))
        report.dsc.append(dsc(p.merged_mask, ref))
        report.n_selected.append(len(p.selected))
    return report


def fold_seed(seed: int, fold: int) -> int:
    return derive_seed(seed, FOLD_SEED_OFFSET + fold) % 2**31


def run_cv(scenes: Sequence, config: RunConfig, head: str | None = None, k: int | None = None) -> CVResult:
    """Train a fresh head on k-1 folds and score the held-out fold, for every fold.

    Fold seeds derive from ``config.seed`` only, so different heads see the
    same splits and initialization streams.
    """
    head = canonical_head(head or config.head)
    k = k or config.folds
    scenes = check_scenes(scenes, config.d_v, require_labels=True, match_threshold=config.match_threshold)
    by_id = {s.scene_id: s for s in scenes}
    folds = kfold_split(list(by_id), k, config.seed)
    template = MaskSelector(head=head, config=config, threads=config.threads)
    reports = []
    for i, held_out in enumerate(folds):
        held = set(held_out)
        train = [s for s in scenes if s.scene_id not in held]
        test = [by_id[sid] for sid in held_out]
        est = clone(template).set_params(seed=fold_seed(config.seed, i))
        try:
            est.fit(train)
        except TrainingAborted as exc:
            raise TrainingAborted(f"fold {i} ({head}): {exc}", exc.dump) from exc
        except STGRError as exc:
            raise type(exc)(f"fold {i} ({head}): {exc}") from exc
        rep = evaluate_scenes(est, test, head, i, len(train))
        log.info("%s fold %d: DSC %.4f IoU %.4f", head, i, rep.dsc_mean, rep.iou_mean)
        reports.append(rep)
    return CVResult(head, reports)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def render_table(results: Sequence[CVResult], delimiter: str = "\t") -> str:
    buf = io.StringIO()
    buf.write(delimiter.join(TABLE_COLUMNS) + "\n")
    for res in results:
        for f in res.folds:
            buf.write(delimiter.join([res.head, str(f.fold), _fmt(f.iou_mean), _fmt(f.dsc_mean),
                                      str(f.n_scenes)]) + "\n")
        n = sum(f.n_scenes for f in res.folds)
        buf.write(delimiter.join([res.head, "mean", f"{_fmt(res.iou_mean)} ± {_fmt(res.iou_std)}",
                                  f"{_fmt(res.dsc_mean)} ± {_fmt(res.dsc_std)}", str(n)]) + "\n")
    by_head = {r.head: r for r in results}
    if "stgr" in by_head and "linear" in by_head:
        a, b = by_head["stgr"], by_head["linear"]
        buf.write(delimiter.join(["gap(stgr-linear)", "mean", _fmt(a.iou_mean - b.iou_mean),
                                  _fmt(a.dsc_mean - b.dsc_mean), str(sum(f.n_scenes for f in a.folds))]) + "\n")
    return buf.getvalue()


def report_document(results: Sequence[CVResult], config: RunConfig | None = None) -> dict:
    doc = {"results": [r.to_dict() for r in results]}
    by_head = {r.head: r for r in results}
    if "stgr" in by_head and "linear" in by_head:
        a, b = by_head["stgr"], by_head["linear"]
        gaps = [fa.dsc_mean - fb.dsc_mean for fa, fb in zip(a.folds, b.folds)]
        doc["gap"] = {"heads": ["stgr", "linear"], "DSC_mean": a.dsc_mean - b.dsc_mean,
                      "IoU_mean": a.iou_mean - b.iou_mean, "DSC_per_fold": gaps}
    if config is not None:
        doc["config"] = config.to_dict()
    body = json.dumps(doc, sort_keys=True).encode()
    doc["digest"] = hashlib.sha256(body).hexdigest()
    return doc


def emit_report(results: Sequence[CVResult], out_dir, config: RunConfig | None = None,
                formats: Sequence[str] = ("structured-text", "delimited-table")) -> dict[str, Path]:
    """Write ``report.json`` and/or ``report.tsv``; returns the written paths."""
    results = list(results)
    if not results or any(not r.folds for r in results):
        raise ArgumentError("nothing to report")
    out = Path(out_dir)
    written = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        for fmt in formats:
            if fmt == "structured-text":
                doc = report_document(results, config)
                written[fmt] = checkpoint.atomic_write(out / "report.json",
                                                       json.dumps(doc, indent=2, sort_keys=True) + "\n")
            elif fmt == "delimited-table":
                written[fmt] = checkpoint.atomic_write(out / "report.tsv", render_table(results))
            else:
                raise ArgumentError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc.strerror or exc}") from exc
    return written


def fold_gaps(a: CVResult, b: CVResult) -> list[float]:
    if len(a.folds) != len(b.folds):
        raise ArgumentError("results have different fold counts")
    return [fa.dsc_mean - fb.dsc_mean for fa, fb in zip(a.folds, b.folds)]


def is_finite_report(res: CVResult) -> bool:
    return all(math.isfinite(v) for f in res.folds for v in f.dsc + f.iou)
