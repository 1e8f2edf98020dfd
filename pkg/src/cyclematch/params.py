"""Trainable state for the matcher and its JSON serialization.

One CycleParams bundle holds, for C classes and S scales:

    fpn          S lateral matrices (d_fpn x d_enc_s), shared across classes
    w_feat_map   per class/scale test-map projector (d_proj x d_fpn)
    w_feat       per class/scale target-side projector (d_proj x d_fpn)
    w_scale      C x S similarity-scale logits (softmax-normalized at use)
    w_mask       C x 3 decoder-candidate logits (softmax-normalized at use)
    thresholds   per-class positive-prompt cutoff

Matrices serialize as row-major float32 arrays with explicit dims, so a
round trip through JSON is lossless bit-for-bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError


def _as_f32(a, dims=None) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    if dims is not None:
        arr = arr.reshape(dims)
    if not np.isfinite(arr).all():
        raise ArgumentError("parameter matrix contains NaN/Inf")
    return arr


def _mat_to_json(m: np.ndarray) -> dict:
    return {"dims": list(m.shape), "data": [float(x) for x in m.reshape(-1)]}


def _mat_from_json(obj: dict) -> np.ndarray:
    try:
        return _as_f32(obj["data"], dims=obj["dims"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad matrix entry in params JSON: {exc}") from exc


@dataclass
class CycleParams:
    num_classes: int
    num_scales: int
    d_fpn: int
    d_proj: int
    fpn: list = field(repr=False)            # [s] -> (d_fpn, d_enc_s)
    w_feat_map: list = field(repr=False)     # [c][s] -> (d_proj, d_fpn)
    w_feat: list = field(repr=False)         # [c][s] -> (d_proj, d_fpn)
    w_scale: np.ndarray = field(repr=False)  # (C, S)
    w_mask: np.ndarray = field(repr=False)   # (C, 3)
    thresholds: np.ndarray = field(repr=False)  # (C,)

    def __post_init__(self):
        if self.num_classes < 1 or self.num_scales < 1:
            raise ArgumentError("need >= 1 class and >= 1 scale")
        if len(self.fpn) != self.num_scales:
            raise ArgumentError("one fpn lateral per scale required")
        self.fpn = [_as_f32(m) for m in self.fpn]
        self.w_feat_map = [[_as_f32(m) for m in row] for row in self.w_feat_map]
        self.w_feat = [[_as_f32(m) for m in row] for row in self.w_feat]
        self.w_scale = _as_f32(self.w_scale, (self.num_classes, self.num_scales))
        self.w_mask = _as_f32(self.w_mask, (self.num_classes, 3))
        self.thresholds = _as_f32(self.thresholds, (self.num_classes,))

    @property
    def enc_channels(self) -> list:
        return [m.shape[1] for m in self.fpn]

    @classmethod
    def identity(cls, num_classes: int, enc_channels: list) -> "CycleParams":
        """Pass-through parameters: identity laterals/projectors, flat weights.

        Requires every scale to share one channel count, which becomes both
        d_fpn and d_proj.
        """
        chans = set(enc_channels)
        if len(chans) != 1:
            raise ArgumentError(
                f"identity params need one shared channel count, got {enc_channels}"
            )
        d = enc_channels[0]
        s = len(enc_channels)
        eye = np.eye(d, dtype=np.float32)
        return cls(
            num_classes=num_classes,
            num_scales=s,
            d_fpn=d,
            d_proj=d,
            fpn=[eye.copy() for _ in range(s)],
            w_feat_map=[[eye.copy() for _ in range(s)] for _ in range(num_classes)],
            w_feat=[[eye.copy() for _ in range(s)] for _ in range(num_classes)],
            w_scale=np.zeros((num_classes, s), dtype=np.float32),
            w_mask=np.zeros((num_classes, 3), dtype=np.float32),
            thresholds=np.zeros(num_classes, dtype=np.float32),
        )

    @classmethod
    def random_init(
        cls,
        num_classes: int,
        enc_channels: list,
        d_fpn: int,
        d_proj: int,
        seed: int = 0,
    ) -> "CycleParams":
        """Gaussian init scaled by 1/sqrt(fan_in); weights/thresholds zero."""
        rng = np.random.default_rng(seed)
        s = len(enc_channels)

        def mat(rows, cols):
            return (rng.standard_normal((rows, cols)) / np.sqrt(cols)).astype(np.float32)

        return cls(
            num_classes=num_classes,
            num_scales=s,
            d_fpn=d_fpn,
            d_proj=d_proj,
            fpn=[mat(d_fpn, e) for e in enc_channels],
            w_feat_map=[[mat(d_proj, d_fpn) for _ in range(s)] for _ in range(num_classes)],
            w_feat=[[mat(d_proj, d_fpn) for _ in range(s)] for _ in range(num_classes)],
            w_scale=np.zeros((num_classes, s), dtype=np.float32),
            w_mask=np.zeros((num_classes, 3), dtype=np.float32),
            thresholds=np.zeros(num_classes, dtype=np.float32),
        )

    def copy(self) -> "CycleParams":
        return CycleParams(
            num_classes=self.num_classes,
            num_scales=self.num_scales,
            d_fpn=self.d_fpn,
            d_proj=self.d_proj,
            fpn=[m.copy() for m in self.fpn],
            w_feat_map=[[m.copy() for m in row] for row in self.w_feat_map],
            w_feat=[[m.copy() for m in row] for row in self.w_feat],
            w_scale=self.w_scale.copy(),
            w_mask=self.w_mask.copy(),
            thresholds=self.thresholds.copy(),
        )

    def to_json_dict(self) -> dict:
        projectors = {}
        for c in range(self.num_classes):
            per_scale = {}
            for s in range(self.num_scales):
                per_scale[str(s + 1)] = {
                    "w_feat_map": _mat_to_json(self.w_feat_map[c][s]),
                    "w_feat": _mat_to_json(self.w_feat[c][s]),
                }
            projectors[str(c + 1)] = per_scale
        return {
            "num_classes": self.num_classes,
            "num_scales": self.num_scales,
            "d_fpn": self.d_fpn,
            "d_proj": self.d_proj,
            "projectors": projectors,
            "fpn": {str(s + 1): _mat_to_json(self.fpn[s]) for s in range(self.num_scales)},
            "w_scale": _mat_to_json(self.w_scale),
            "w_mask": _mat_to_json(self.w_mask),
            "thresholds": {
                str(c + 1): float(self.thresholds[c]) for c in range(self.num_classes)
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CycleParams":
        try:
            n_c = int(obj["num_classes"])
            n_s = int(obj["num_scales"])
            fpn = [_mat_from_json(obj["fpn"][str(s + 1)]) for s in range(n_s)]
            w_feat_map = [
                [
                    _mat_from_json(obj["projectors"][str(c + 1)][str(s + 1)]["w_feat_map"])
                    for s in range(n_s)
                ]
                for c in range(n_c)
            ]
            w_feat = [
                [
                    _mat_from_json(obj["projectors"][str(c + 1)][str(s + 1)]["w_feat"])
                    for s in range(n_s)
                ]
                for c in range(n_c)
            ]
            thresholds = [float(obj["thresholds"][str(c + 1)]) for c in range(n_c)]
            return cls(
                num_classes=n_c,
                num_scales=n_s,
                d_fpn=int(obj["d_fpn"]),
                d_proj=int(obj["d_proj"]),
                fpn=fpn,
                w_feat_map=w_feat_map,
                w_feat=w_feat,
                w_scale=_mat_from_json(obj["w_scale"]),
                w_mask=_mat_from_json(obj["w_mask"]),
                thresholds=thresholds,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed CycleParams JSON: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        text = json.dumps(self.to_json_dict(), indent=1, sort_keys=True)
        tmp = str(path) + f".tmp.{os.getpid()}"
        with open(tmp, "w") as fh:
            fh.write(text + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CycleParams":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"params file is not valid JSON: {exc}") from exc
        return cls.from_json_dict(obj)


def softnorm(x: np.ndarray) -> np.ndarray:
    """Exponential normalization along the last axis (numerically shifted)."""
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
