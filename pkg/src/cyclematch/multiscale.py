"""Multiscale matching: pyramid fusion, projection, scale-weighted aggregation.

The pyramid fusion is a linear FPN variant: each scale gets a lateral 1x1
projection to d_fpn channels, coarser results are bilinearly upsampled and
added top-down, and each fused scale is channel-normalized. Projectors are
per-class, per-scale linear maps applied after fusion; the reference map is
projected with the target-side matrix so target construction and rematching
share one embedding space.

Aggregation runs the single-scale matcher per scale, resizes every penalized
similarity map to the finest extent, and mixes them with the class's
softmax-normalized scale weights in ascending scale order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cycleselect as cs
from .errors import ArgumentError, EmptyForeground
from .params import CycleParams, softnorm
from .tensor import l2_normalize_channels, resize_bilinear, resize_nearest


@dataclass(frozen=True)
class ScaleSet:
    """Feature maps for one image, finest scale first.

    Construction sorts by descending spatial extent (stable for equal
    extents) so downstream code can index scales positionally.
    """

    maps: tuple

    def __init__(self, maps):
        maps = [np.asarray(m) for m in maps]
        if not maps:
            raise ArgumentError("ScaleSet needs at least one feature map")
        for m in maps:
            if m.ndim != 3:
                raise ArgumentError(f"feature maps are C x H x W, got {m.shape}")
            if m.shape[1] != m.shape[2]:
                raise ArgumentError(f"match grids are square, got {m.shape}")
        order = sorted(range(len(maps)), key=lambda i: -maps[i].shape[1])
        object.__setattr__(self, "maps", tuple(maps[i] for i in order))

    def __len__(self):
        return len(self.maps)

    @property
    def extents(self):
        return [m.shape[1] for m in self.maps]

    @property
    def channels(self):
        return [m.shape[0] for m in self.maps]


def fuse_fpn(scales: ScaleSet, laterals: list) -> list:
    """Lateral-project every scale, add upsampled coarser results, normalize.

    Returns one d_fpn x d_s x d_s array per scale, finest first.
    """
    if len(laterals) != len(scales):
        raise ArgumentError("one lateral matrix per scale required")
    pre = []
    for s in range(len(scales) - 1, -1, -1):
        h = scales.maps[s]
        lat = np.asarray(laterals[s], dtype=h.dtype if h.dtype == np.float64 else np.float32)
        if lat.shape[1] != h.shape[0]:
            raise ArgumentError(
                f"lateral for scale {s + 1} expects {lat.shape[1]} channels, map has {h.shape[0]}"
            )
        p = (lat @ h.reshape(h.shape[0], -1)).reshape(lat.shape[0], h.shape[1], h.shape[2])
        if pre:
            coarser = pre[-1]
            p = p + resize_bilinear(coarser, h.shape[1], h.shape[2])
        pre.append(p)
    pre.reverse()
    return [l2_normalize_channels(p) for p in pre]


def project(features: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a linear projector to C x H x W features and re-normalize."""
    m = np.asarray(matrix, dtype=features.dtype if features.dtype == np.float64 else np.float32)
    if m.shape[1] != features.shape[0]:
        raise ArgumentError(
            f"projector expects {m.shape[1]} channels, features have {features.shape[0]}"
        )
    q = (m @ features.reshape(features.shape[0], -1)).reshape(
        m.shape[0], features.shape[1], features.shape[2]
    )
    return l2_normalize_channels(q)


def multiscale_cycleselect(
    ref: ScaleSet,
    test: ScaleSet,
    mask: np.ndarray,
    c: int,
    params: CycleParams,
    n_points: int = 16,
    lam_scc: float = 2.0,
) -> np.ndarray:
    """Scale-weighted penalized similarity map at the finest extent.

    ``mask`` is the reference label mask at any extent; it is nearest-resized
    per scale. Scales where the class vanishes after resizing are dropped and
    the remaining scale weights renormalized; if the class vanishes at every
    scale EmptyForeground propagates (class absent).
    """
    if len(ref) != len(test) or len(ref) != params.num_scales:
        raise ArgumentError("ref/test/params scale counts disagree")
    if not 1 <= c <= params.num_classes:
        raise ArgumentError(f"class {c} outside 1..{params.num_classes}")
    fused_ref = fuse_fpn(ref, params.fpn)
    fused_test = fuse_fpn(test, params.fpn)
    d1 = ref.extents[0]

    per_scale = []
    kept = []
    for s in range(params.num_scales):
        d_s = ref.extents[s]
        mask_s = resize_nearest(mask, d_s, d_s)
        g_ref = project(fused_ref[s], params.w_feat[c - 1][s])
        g_test = project(fused_test[s], params.w_feat_map[c - 1][s])
        try:
            s_scc = cs.cycleselect(g_ref, g_test, mask_s, c, n_points, lam_scc)
        except EmptyForeground:
            continue
        if d_s != d1:
            s_scc = resize_bilinear(s_scc[None, :, :], d1, d1)[0]
        per_scale.append(s_scc)
        kept.append(s)
    if not per_scale:
        raise EmptyForeground(f"class {c} absent from the reference at every scale")
    weights = softnorm(params.w_scale[c - 1, kept].astype(np.float64))
    agg = np.zeros((d1, d1), dtype=np.float64)
    for w, m in zip(weights, per_scale):
        agg = agg + w * m.astype(np.float64)
    return agg.astype(per_scale[0].dtype)
