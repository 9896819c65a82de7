"""Overlap metrics between a predicted and a reference mask."""
from __future__ import annotations

from .errors import ShapeError
from .masks import Mask, intersection_area, mask_union_all


def _counts(p: Mask, g: Mask) -> tuple[int, int, int]:
    if p.shape != g.shape:
        raise ShapeError(f"metric needs a shared grid: {p.shape} vs {g.shape}")
    return intersection_area(p, g), p.area(), g.area()


def dsc(p: Mask, g: Mask) -> float:
    """Dice similarity ``2|P & G| / (|P| + |G|)``; 1.0 when both are empty."""
    inter, a, b = _counts(p, g)
    if a + b == 0:
        return 1.0
    # int / int is correctly rounded, so this is the exact ratio to one ulp
    return (2 * inter) / (a + b)


def iou_metric(p: Mask, g: Mask) -> float:
    """Jaccard index; 1.0 when both are empty, 0.0 when exactly one is."""
    inter, a, b = _counts(p, g)
    union = a + b - inter
    if union == 0:
        return 1.0
    return inter / union


def reference_mask(scene) -> Mask:
    """Union of all ground-truth lesions, or the empty mask if there are none."""
    if not scene.gt:
        return Mask.empty(scene.height, scene.width)
    return mask_union_all(scene.gt)


def f1_score(selected, labels) -> float:
    """Candidate-level F1 of a boolean selection against 0/1 labels."""
    tp = fp = fn = 0
    for s, y in zip(selected, labels):
        tp += bool(s) and bool(y)
        fp += bool(s) and not y
        fn += (not s) and bool(y)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)
