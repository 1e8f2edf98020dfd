"""Segmentation metrics and per-class mask assembly.

Means exclude the background class and skip classes absent from both the
prediction and the ground truth, so one-shot evaluation of rare classes
stays meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError


@dataclass
class SegResult:
    per_class_iou: dict = field(default_factory=dict)
    per_class_dice: dict = field(default_factory=dict)
    miou_nb: float = 0.0
    mdice: float = 0.0
    skipped_classes: int = 0

    def to_json_dict(self) -> dict:
        return {
            "per_class_iou": {str(c): v for c, v in sorted(self.per_class_iou.items())},
            "per_class_dice": {str(c): v for c, v in sorted(self.per_class_dice.items())},
            "miou_nb": self.miou_nb,
            "mdice": self.mdice,
            "skipped_classes": self.skipped_classes,
        }


def assemble_semantic(per_class_logits: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Combine C mask logit grids into one label mask.

    A pixel takes the class with the largest positive logit; logit ties go to
    the class with the higher score, then to the smaller class id. Pixels
    with no positive logit stay background.
    """
    logits = np.asarray(per_class_logits, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if logits.ndim != 3:
        raise ArgumentError(f"expected C x H x W logits, got {logits.shape}")
    if scores.shape != (logits.shape[0],):
        raise ArgumentError("one score per class required")
    n_c, h, w = logits.shape
    labels = np.zeros((h, w), dtype=np.uint8)
    best_logit = np.full((h, w), -np.inf)
    best_score = np.full((h, w), -np.inf)
    for c in range(1, n_c + 1):
        z = logits[c - 1]
        take = (z > 0) & (
            (z > best_logit) | ((z == best_logit) & (scores[c - 1] > best_score))
        )
        labels[take] = c
        best_logit[take] = z[take]
        best_score[take] = scores[c - 1]
    return labels


def miou_nb(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> SegResult:
    """Mean IoU and Dice over object classes 1..C, background excluded."""
    if pred.shape != gt.shape:
        raise ArgumentError(f"pred {pred.shape} != gt {gt.shape}")
    if num_classes < 1:
        raise ArgumentError("need at least one object class")
    res = SegResult()
    ious, dices = [], []
    for c in range(1, num_classes + 1):
        p = pred == c
        g = gt == c
        inter = int(np.count_nonzero(p & g))
        p_count = int(np.count_nonzero(p))
        g_count = int(np.count_nonzero(g))
        union = p_count + g_count - inter
        if union == 0:
            res.skipped_classes += 1
            continue
        iou = inter / union
        dice = 2.0 * inter / (p_count + g_count)
        res.per_class_iou[c] = iou
        res.per_class_dice[c] = dice
        ious.append(iou)
        dices.append(dice)
    if ious:
        res.miou_nb = float(np.mean(ious))
        res.mdice = float(np.mean(dices))
    return res
