"""Synthetic matching scenes for closed-loop testing.

A scene holds three views of the same class vocabulary: a reference, a
jittered copy of the reference (the training view), and a test view with
independently placed objects. Each class blob is a random-walk-grown
connected region; its cells carry a class-specific unit feature direction
plus Gaussian noise. Background cells carry independent random directions.

The distractor level converts a fraction of background cells, in every
view, into imitations of a class direction blended with a distractor-only
flavor direction. Imitations score high against class targets, which
defeats naive matching, but their nearest reference feature is another
distractor (a background cell), so cycle-consistent matching penalizes
them.

Scenes regenerate bit-exactly from (seed, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .multiscale import ScaleSet
from .tensor import resize_nearest


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 3
    extent: int = 32
    num_scales: int = 2
    d_enc: int = 24
    noise: float = 0.25
    distractor_level: float = 0.0
    distractor_alpha: float = 0.9  # similarity of an imitation to the class direction
    distractor_noise: float = -1.0  # noise on imitation cells; < 0 means 0.2 * noise
    blob_area: float = 0.05         # target blob size as a fraction of the grid
    jitter: int = 2                 # max |shift| of the training view's blobs

    def __post_init__(self):
        if self.num_classes < 1:
            raise ArgumentError("need at least one class")
        if self.extent < 4 or self.extent % (1 << (self.num_scales - 1)):
            raise ArgumentError(
                f"extent {self.extent} must be divisible by 2^(scales-1)"
            )
        if not 0.0 <= self.distractor_level < 1.0:
            raise ArgumentError("distractor_level must be in [0, 1)")

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "extent": self.extent,
            "num_scales": self.num_scales,
            "d_enc": self.d_enc,
            "noise": self.noise,
            "distractor_level": self.distractor_level,
            "distractor_alpha": self.distractor_alpha,
            "distractor_noise": self.distractor_noise,
            "blob_area": self.blob_area,
            "jitter": self.jitter,
        }


@dataclass
class SynthScene:
    seed: int
    config: SynthConfig
    ref: ScaleSet = field(repr=False)
    ref_mask: np.ndarray = field(repr=False)
    train: ScaleSet = field(repr=False)
    train_mask: np.ndarray = field(repr=False)
    test: ScaleSet = field(repr=False)
    test_mask: np.ndarray = field(repr=False)

    @property
    def extents(self):
        return self.ref.extents


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.sqrt((v * v).sum())


def _grow_blob(rng: np.random.Generator, occupied: np.ndarray, target: int) -> list:
    """Grow a 4-connected region of ~target free cells; returns (row, col) list."""
    h, w = occupied.shape
    free = np.argwhere(~occupied)
    if free.size == 0:
        raise ArgumentError("grid full, cannot place blob")
    start = tuple(free[rng.integers(len(free))])
    blob = [start]
    member = {start}
    for _ in range(target * 40):
        if len(blob) >= target:
            break
        r, c = blob[rng.integers(len(blob))]
        for k in rng.permutation(4):
            nr, nc = r + (-1, 1, 0, 0)[k], c + (0, 0, -1, 1)[k]
            if 0 <= nr < h and 0 <= nc < w and (nr, nc) not in member and not occupied[nr, nc]:
                blob.append((nr, nc))
                member.add((nr, nc))
                break
    return blob


def _place_blobs(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    mask = np.zeros((cfg.extent, cfg.extent), dtype=np.uint8)
    target = max(4, int(round(cfg.blob_area * cfg.extent * cfg.extent)))
    occupied = np.zeros_like(mask, dtype=bool)
    for c in range(1, cfg.num_classes + 1):
        blob = _grow_blob(rng, occupied, target)
        for r, col in blob:
            mask[r, col] = c
            occupied[r, col] = True
        # keep one free ring so adjacent classes stay separable after resize
        for r, col in blob:
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, col + dc
                if 0 <= rr < cfg.extent and 0 <= cc < cfg.extent and mask[rr, cc] == 0:
                    occupied[rr, cc] = True
    return mask


def _shift_mask(mask: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    src_r = slice(max(0, -dr), min(h, h - dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_r = slice(max(0, dr), min(h, h + dr))
    dst_c = slice(max(0, dc), min(w, w + dc))
    out[dst_r, dst_c] = mask[src_r, src_c]
    return out


def _imitation_mask(
    rng: np.random.Generator, cfg: SynthConfig, mask: np.ndarray
) -> np.ndarray:
    """Full-resolution imitation labels on background cells.

    0 = plain background, c in 1..C = imitation of class c. The mask is
    nearest-resized alongside the class mask so imitation regions persist
    at every scale.
    """
    imit = np.zeros_like(mask)
    bg_idx = np.flatnonzero(mask.reshape(-1) == 0)
    n_distract = int(np.floor(cfg.distractor_level * bg_idx.size))
    if not n_distract:
        return imit
    chosen = bg_idx[rng.permutation(bg_idx.size)[:n_distract]]
    imit.reshape(-1)[chosen] = rng.integers(1, cfg.num_classes + 1, size=n_distract)
    return imit


def _view_features(
    rng: np.random.Generator,
    cfg: SynthConfig,
    mask: np.ndarray,
    imit: np.ndarray,
    class_dirs: np.ndarray,
    distractor_dirs: np.ndarray,
) -> ScaleSet:
    d_noise = cfg.distractor_noise if cfg.distractor_noise >= 0 else 0.2 * cfg.noise
    alpha = cfg.distractor_alpha
    beta = np.sqrt(1.0 - alpha * alpha)
    # noise levels are relative to the unit signal direction: a level of x
    # perturbs by a vector of expected norm x
    rel = 1.0 / np.sqrt(cfg.d_enc)
    maps = []
    for s in range(cfg.num_scales):
        d_s = cfg.extent >> s
        labels = resize_nearest(mask, d_s, d_s).reshape(-1)
        imit_s = resize_nearest(imit, d_s, d_s).reshape(-1)
        n = d_s * d_s
        noise = rng.standard_normal((cfg.d_enc, n))
        feats = noise.copy()  # plain background: independent random directions
        for c in range(1, cfg.num_classes + 1):
            sel = labels == c
            feats[:, sel] = class_dirs[c - 1][:, None] + cfg.noise * rel * noise[:, sel]
            flavored = (labels == 0) & (imit_s == c)
            base = alpha * class_dirs[c - 1] + beta * distractor_dirs[c - 1]
            feats[:, flavored] = base[:, None] + d_noise * rel * noise[:, flavored]
        norms = np.sqrt((feats * feats).sum(axis=0))
        norms[norms < 1e-12] = 1.0
        feats = feats / norms[None, :]
        maps.append(feats.reshape(cfg.d_enc, d_s, d_s).astype(np.float32))
    return ScaleSet(maps)


def synth_scene(seed: int, cfg: SynthConfig | None = None) -> SynthScene:
    """Generate a scene deterministically from (seed, config)."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    class_dirs = np.stack(
        [_unit(rng.standard_normal(cfg.d_enc)) for _ in range(cfg.num_classes)]
    )
    distractor_dirs = np.stack(
        [_unit(rng.standard_normal(cfg.d_enc)) for _ in range(cfg.num_classes)]
    )
    ref_mask = _place_blobs(rng, cfg)
    dr = int(rng.integers(-cfg.jitter, cfg.jitter + 1))
    dc = int(rng.integers(-cfg.jitter, cfg.jitter + 1))
    train_mask = _shift_mask(ref_mask, dr, dc)
    for c in range(1, cfg.num_classes + 1):
        if not (train_mask == c).any():  # jitter pushed the blob off-grid
            train_mask = ref_mask.copy()
            break
    test_mask = _place_blobs(rng, cfg)
    ref_imit = _imitation_mask(rng, cfg, ref_mask)
    train_imit = _imitation_mask(rng, cfg, train_mask)
    test_imit = _imitation_mask(rng, cfg, test_mask)
    ref = _view_features(rng, cfg, ref_mask, ref_imit, class_dirs, distractor_dirs)
    train = _view_features(rng, cfg, train_mask, train_imit, class_dirs, distractor_dirs)
    test = _view_features(rng, cfg, test_mask, test_imit, class_dirs, distractor_dirs)
    return SynthScene(
        seed=seed, config=cfg,
        ref=ref, ref_mask=ref_mask,
        train=train, train_mask=train_mask,
        test=test, test_mask=test_mask,
    )


def scene_manifest(scene: SynthScene, files: dict) -> str:
    obj = {
        "seed": scene.seed,
        "config": scene.config.to_json_dict(),
        "extents": scene.extents,
        "files": files,
    }
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"
