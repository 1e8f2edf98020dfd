"""Turn similarity maps into decoder point prompts.

Positives are the top-k cells at or above the class threshold; the threshold
is the midpoint of the foreground-mean and background-mean similarity (each
mean normalized by its cell count so the value lives on the similarity
scale). Negatives are the top-k cells of the lowest of three Lloyd-clustered
score bins, never reusing a positive cell. Grid cells map to image pixels at
their half-pixel centers; all orderings break ties toward the smaller flat
grid index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateMask


@dataclass(frozen=True)
class PromptPoint:
    x: int
    y: int
    score: float


@dataclass(frozen=True)
class PromptSet:
    class_id: int
    image_size: tuple  # (width, height)
    positives: tuple = field(default_factory=tuple)
    negatives: tuple = field(default_factory=tuple)

    @property
    def empty(self) -> bool:
        return not self.positives

    def to_json_dict(self) -> dict:
        return {
            "class": self.class_id,
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
            "positives": [
                {"x": p.x, "y": p.y, "score": float(p.score)} for p in self.positives
            ],
            "negatives": [
                {"x": p.x, "y": p.y, "score": float(p.score)} for p in self.negatives
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "PromptSet":
        return cls(
            class_id=int(obj["class"]),
            image_size=(int(obj["image_size"][0]), int(obj["image_size"][1])),
            positives=tuple(
                PromptPoint(int(p["x"]), int(p["y"]), float(p["score"]))
                for p in obj["positives"]
            ),
            negatives=tuple(
                PromptPoint(int(p["x"]), int(p["y"]), float(p["score"]))
                for p in obj["negatives"]
            ),
        )


def compute_threshold(s: np.ndarray, b: np.ndarray) -> float:
    """Midpoint of mean foreground and mean background similarity."""
    if s.shape != b.shape:
        raise ArgumentError(f"map {s.shape} != mask {b.shape}")
    fg = int(b.sum())
    total = b.size
    if fg == 0 or fg == total:
        raise DegenerateMask("threshold needs both foreground and background cells")
    sf = s.astype(np.float64)
    t_pos = float((sf * b).sum() / fg)
    t_neg = float((sf * (1 - b)).sum() / (total - fg))
    return 0.5 * (t_pos + t_neg)


def cluster_3bins(values: np.ndarray, max_iter: int = 100) -> np.ndarray:
    """1-D 3-means with min/median/max init, run to an assignment fixpoint.

    Returns a bin id per value with bins ordered by ascending centroid, so
    bin 0 holds the lowest scores. Assignment ties go to the lower bin.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        return np.zeros(0, dtype=np.int64)
    centroids = np.array([v.min(), np.median(v), v.max()], dtype=np.float64)
    assign = np.argmin(np.abs(v[:, None] - centroids[None, :]), axis=1)
    for _ in range(max_iter):
        for k in range(3):
            sel = assign == k
            if sel.any():
                centroids[k] = v[sel].mean()
        new = np.argmin(np.abs(v[:, None] - centroids[None, :]), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    order = np.argsort(centroids, kind="stable")
    remap = np.empty(3, dtype=np.int64)
    remap[order] = np.arange(3)
    return remap[assign]


def _ranked(flat_scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidate flat indices by descending score, ties toward smaller index."""
    if candidates.size == 0:
        return candidates
    order = np.argsort(-flat_scores[candidates], kind="stable")
    return candidates[order]


def grid_to_image(i: int, j: int, grid: int, width: int, height: int) -> tuple:
    """Half-pixel center of grid cell (row i, col j) in image pixels."""
    x = int(np.floor((j + 0.5) * (width / grid) - 0.5 + 0.5))
    y = int(np.floor((i + 0.5) * (height / grid) - 0.5 + 0.5))
    return min(max(x, 0), width - 1), min(max(y, 0), height - 1)


def _to_points(flat_idx: np.ndarray, s: np.ndarray, image_size: tuple) -> tuple:
    d = s.shape[0]
    w, h = image_size
    pts = []
    for f in flat_idx:
        i, j = divmod(int(f), d)
        x, y = grid_to_image(i, j, d, w, h)
        pts.append(PromptPoint(x, y, float(s[i, j])))
    return tuple(pts)


def sample_prompts(
    s: np.ndarray,
    threshold: float,
    k: int,
    image_size: tuple,
    class_id: int = 1,
    include_negatives: bool = True,
) -> PromptSet:
    """Top-k thresholded positives plus top-k lowest-bin negatives.

    An empty result (no cell reaches the threshold) marks the class absent;
    callers skip the decoder for such sets.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ArgumentError(f"similarity map must be square, got {s.shape}")
    flat = s.reshape(-1).astype(np.float64)
    pos_cells = _ranked(flat, np.flatnonzero(flat >= threshold))[:k]
    if pos_cells.size == 0:
        return PromptSet(class_id=class_id, image_size=tuple(image_size))
    negatives = ()
    if include_negatives:
        bins = cluster_3bins(flat)
        low = np.flatnonzero(bins == 0)
        low = low[~np.isin(low, pos_cells)]
        neg_cells = _ranked(flat, low)[:k]
        negatives = _to_points(neg_cells, s, image_size)
    return PromptSet(
        class_id=class_id,
        image_size=tuple(image_size),
        positives=_to_points(pos_cells, s, image_size),
        negatives=negatives,
    )


def single_point_mode(s: np.ndarray, image_size: tuple, class_id: int = 1) -> PromptSet:
    """One positive at the global argmax; no threshold, no negatives."""
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ArgumentError(f"similarity map must be square, got {s.shape}")
    best = int(np.argmax(s.reshape(-1)))
    return PromptSet(
        class_id=class_id,
        image_size=tuple(image_size),
        positives=_to_points(np.array([best]), s, image_size),
    )
