from __future__ import annotations

from typing import Sequence

import numpy as np

from .masks import Mask, mask_iou


def label_candidates(candidates: Sequence[Mask], gt_lesions: Sequence[Mask],
                     match_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Assign each candidate its best IoU against any lesion and a 0/1 label.

    A scene without lesions is valid: every candidate gets label 0 and IoU 0.
    """
    n = len(candidates)
    true_iou = np.zeros(n)
    if gt_lesions:
        for i, cand in enumerate(candidates):
            true_iou[i] = max(mask_iou(cand, g) for g in gt_lesions)
    labels = (true_iou >= match_threshold).astype(np.int64)
    return labels, true_iou
