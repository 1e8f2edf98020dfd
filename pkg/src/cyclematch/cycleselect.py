"""Single-scale cycle-consistent feature matching.

Pipeline for one class at one scale, all on a d x d grid:

    binarize mask -> sample foreground points -> build target features ->
    sign-aware similarity aggregation -> dense rematch + cycle mask ->
    additive penalty on cycle-inconsistent cells

Feature maps enter channel-normalized (see tensor.l2_normalize_channels);
similarities are then plain dot products. Every argmax in this module breaks
ties toward the smaller flat row-major index so results are deterministic
across runs and thread counts.

Target construction and similarity aggregation accumulate in float64 with a
fixed sequential reduction order (ascending channel / cell index), so their
outputs are bit-for-bit reproducible against a scalar reference
implementation; they do not depend on BLAS reduction order. Similarity maps
are returned as float64.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, EmptyForeground
from .tensor import NORM_EPS

# Dot products with the reference map are evaluated in column blocks of this
# size; the running max keeps the per-row reduction order fixed.
REMATCH_BLOCK = 64


def binarize_mask(m: np.ndarray, c: int) -> np.ndarray:
    """1 where the label mask equals class ``c``, else 0 (uint8)."""
    if c < 1:
        raise ArgumentError(f"class id must be >= 1, got {c}")
    return (m == c).astype(np.uint8)


def sample_foreground_points(b: np.ndarray, n_points: int) -> np.ndarray:
    """Evenly sample up to ``n_points`` foreground cells in row-major order.

    With N foreground cells, returns all of them when N <= n_points, else the
    cells at row-major ranks floor(i*N/n_points). Returns flat indices.
    """
    if n_points < 1:
        raise ArgumentError(f"n_points must be >= 1, got {n_points}")
    flat = np.flatnonzero(b.reshape(-1))
    n = flat.size
    if n == 0:
        raise EmptyForeground("mask has no foreground cells")
    if n <= n_points:
        return flat
    ranks = (np.arange(n_points, dtype=np.int64) * n) // n_points
    return flat[ranks]


def build_target_features(h_ref: np.ndarray, b: np.ndarray, n_points: int) -> np.ndarray:
    """Stack sampled foreground point features plus a re-normalized mean row.

    ``h_ref`` is C x d x d, channel-normalized; ``b`` the binary mask at the
    same extent. Result is X x C float64 with X = min(N, n_points) + 1; the
    final row is the mean of all foreground features scaled back to unit
    norm (left zero if the mean is degenerate). The mean accumulates over
    foreground cells in ascending row-major order.
    """
    if h_ref.shape[1:] != b.shape:
        raise ArgumentError(f"feature grid {h_ref.shape[1:]} != mask {b.shape}")
    flat = h_ref.reshape(h_ref.shape[0], -1).astype(np.float64)
    idx = sample_foreground_points(b, n_points)
    points = flat[:, idx].T
    fg = np.flatnonzero(b.reshape(-1))
    acc = np.zeros(flat.shape[0], dtype=np.float64)
    for j in fg:
        acc += flat[:, j]
    mean = acc / fg.size
    sq = 0.0
    for v in mean:
        sq += float(v) * float(v)
    norm = float(np.sqrt(sq))
    if norm < NORM_EPS:
        mean = np.zeros_like(mean)
    else:
        mean = mean / norm
    return np.vstack([points, mean[None, :]])


class _AggDetails(NamedTuple):
    s_all: np.ndarray    # X x n raw similarities
    attained: np.ndarray # n, row index whose max/min was selected per location
    take_max: np.ndarray # n, bool: True where the max branch was selected


def _dots_sequential(targets: np.ndarray, flat: np.ndarray) -> np.ndarray:
    """targets (X x C) . flat (C x n) in float64, accumulating channels in order.

    Equivalent to a scalar triple loop bit-for-bit: per output element the
    products are added in ascending channel index, each with one rounding.
    """
    t = targets.astype(np.float64)
    f = flat.astype(np.float64)
    out = np.zeros((t.shape[0], f.shape[1]), dtype=np.float64)
    for k in range(t.shape[1]):
        out += t[:, k:k + 1] * f[k:k + 1, :]
    return out


def _similarity_aggregate_full(targets: np.ndarray, h_test: np.ndarray) -> tuple[np.ndarray, _AggDetails]:
    if targets.shape[1] != h_test.shape[0]:
        raise ArgumentError(
            f"channel mismatch: targets {targets.shape[1]} vs map {h_test.shape[0]}"
        )
    d_h, d_w = h_test.shape[1:]
    flat = h_test.reshape(h_test.shape[0], -1)
    s_all = _dots_sequential(targets, flat)  # X x n
    dominant = np.argmax(np.abs(s_all), axis=0)
    cols = np.arange(s_all.shape[1])
    take_max = s_all[dominant, cols] >= 0
    mx_idx = np.argmax(s_all, axis=0)
    mn_idx = np.argmin(s_all, axis=0)
    attained = np.where(take_max, mx_idx, mn_idx)
    out = s_all[attained, cols]
    return out.reshape(d_h, d_w), _AggDetails(s_all, attained, take_max)


def similarity_aggregate(targets: np.ndarray, h_test: np.ndarray) -> np.ndarray:
    """Collapse per-target similarities into one map, sign-aware.

    For each test location the target row with the largest |similarity| picks
    the branch: max over targets when that dominant similarity is
    nonnegative, min over targets otherwise.
    """
    out, _ = _similarity_aggregate_full(targets, h_test)
    return out


def rematch_argmax(h_test: np.ndarray, h_ref: np.ndarray, block: int = REMATCH_BLOCK) -> np.ndarray:
    """Best reference cell per test cell under dot-product similarity.

    Streams the n x n similarity matrix in reference-column blocks of size
    ``block`` so the full matrix is never materialized; ties resolve to the
    smaller reference flat index regardless of block size.
    """
    if h_test.shape[0] != h_ref.shape[0]:
        raise ArgumentError(
            f"channel mismatch: test {h_test.shape[0]} vs ref {h_ref.shape[0]}"
        )
    if block < 1:
        raise ArgumentError("block size must be >= 1")
    t = h_test.reshape(h_test.shape[0], -1).T  # n_t x C
    r = h_ref.reshape(h_ref.shape[0], -1)      # C x n_r
    n_t, n_r = t.shape[0], r.shape[1]
    best = np.full(n_t, -np.inf, dtype=t.dtype)
    best_idx = np.zeros(n_t, dtype=np.int64)
    for j0 in range(0, n_r, block):
        sims = t @ r[:, j0:j0 + block]
        loc = np.argmax(sims, axis=1)
        val = sims[np.arange(n_t), loc]
        better = val > best  # strict: earlier blocks win ties
        best_idx[better] = loc[better] + j0
        best[better] = val[better]
    return best_idx


def rematch_naive(h_test: np.ndarray, h_ref: np.ndarray) -> np.ndarray:
    """Row-at-a-time rematch; the unblocked reference for kernel checks."""
    t = h_test.reshape(h_test.shape[0], -1).T
    r = h_ref.reshape(h_ref.shape[0], -1)
    out = np.zeros(t.shape[0], dtype=np.int64)
    for i in range(t.shape[0]):
        out[i] = int(np.argmax(r.T @ t[i]))
    return out


def rematch_scores_blocked(test_rows: np.ndarray, ref_rows: np.ndarray, block: int = REMATCH_BLOCK) -> np.ndarray:
    """Full n_t x n_r similarity matrix computed in square tiles."""
    if block < 1:
        raise ArgumentError("block size must be >= 1")
    n_t, n_r = test_rows.shape[0], ref_rows.shape[0]
    out = np.empty((n_t, n_r), dtype=np.float32)
    for i0 in range(0, n_t, block):
        ti = test_rows[i0:i0 + block]
        for j0 in range(0, n_r, block):
            out[i0:i0 + block, j0:j0 + block] = ti @ ref_rows[j0:j0 + block].T
    return out


def rematch_scores_naive(test_rows: np.ndarray, ref_rows: np.ndarray) -> np.ndarray:
    """Full similarity matrix one test row at a time."""
    n_t = test_rows.shape[0]
    out = np.empty((n_t, ref_rows.shape[0]), dtype=np.float32)
    for i in range(n_t):
        out[i] = ref_rows @ test_rows[i]
    return out


def cycle_consistency_mask(h_test: np.ndarray, h_ref: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 where a test cell's best reference match lands in the foreground.

    Both maps must be channel-normalized with equal channel counts and equal
    spatial extents; ``b`` is the binary reference mask at that extent. The
    rematch runs in float64.
    """
    if h_test.shape != h_ref.shape:
        raise ArgumentError(f"shape mismatch: {h_test.shape} vs {h_ref.shape}")
    if h_ref.shape[1:] != b.shape:
        raise ArgumentError(f"feature grid {h_ref.shape[1:]} != mask {b.shape}")
    j_star = rematch_argmax(h_test.astype(np.float64), h_ref.astype(np.float64))
    return b.reshape(-1)[j_star].reshape(b.shape).astype(np.uint8)


def apply_scc_penalty(s: np.ndarray, cyc: np.ndarray, lam: float) -> np.ndarray:
    """Subtract ``lam`` from similarity cells whose cycle-mask value is 0."""
    if lam < 0:
        raise ArgumentError(f"penalty must be nonnegative, got {lam}")
    return (s - lam * (1.0 - cyc.astype(s.dtype))).astype(s.dtype)


def cycleselect(
    h_ref: np.ndarray,
    h_test: np.ndarray,
    mask: np.ndarray,
    c: int,
    n_points: int = 16,
    lam_scc: float = 2.0,
) -> np.ndarray:
    """Single-scale penalized similarity map for class ``c``.

    ``mask`` is the label mask already at the grid extent of the feature
    maps. Raises EmptyForeground when the class has no reference cells.
    """
    b = binarize_mask(mask, c)
    targets = build_target_features(h_ref, b, n_points)
    s = similarity_aggregate(targets, h_test)
    cyc = cycle_consistency_mask(h_test, h_ref, b)
    return apply_scc_penalty(s, cyc, lam_scc)
