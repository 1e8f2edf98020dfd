"""Tensor container I/O, resize kernels and channel normalization.

Tensors are plain numpy arrays (float32 or uint8, 1-4 axes). Class masks are
2-D uint8 arrays where 0 is background and 1..C are object classes.

The on-disk container is CSTF-1, a minimal bit-exact format:

    magic   4 bytes   0x43 0x53 0x54 0x46 ("CSTF")
    version 1 byte    0x01
    ndim    1 byte    1..4
    extents ndim x u32 little-endian
    dtype   1 byte    1 = float32 little-endian, 2 = uint8
    payload row-major scalar data, no padding, no footer

All functions here are pure; arrays are treated as immutable values and are
safe to share across threads.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ArgumentError, FormatError

_MAGIC = b"CSTF"
_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("uint8"): 2}

NORM_EPS = 1e-8
# Locations whose norm is already within this distance of 1 are passed through
# untouched, which makes repeated normalization bit-exact.
_UNIT_SKIP = 1e-7


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Serialize ``arr`` to ``path`` in CSTF-1. Overwrites atomically."""
    data = encode_tensor(arr)
    tmp = str(path) + f".tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    code = _CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise ArgumentError(f"unsupported dtype {arr.dtype}; CSTF-1 holds f32 or u8")
    if not 1 <= arr.ndim <= 4:
        raise ArgumentError(f"CSTF-1 holds 1-4 axes, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ArgumentError(f"zero extent in shape {arr.shape}")
    if code == 1 and not np.isfinite(arr).all():
        raise ArgumentError("refusing to serialize non-finite float payload")
    header = _MAGIC + struct.pack("<BB", _VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", code)
    if code == 1:
        payload = arr.astype("<f4", copy=False).tobytes()
    else:
        payload = arr.tobytes()
    return header + payload


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a CSTF-1 file. Raises FormatError on any malformation."""
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_tensor(data)


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 6 or data[:4] != _MAGIC:
        raise FormatError("bad magic; not a CSTF-1 file")
    if data[4] != _VERSION:
        raise FormatError(f"unsupported CSTF version {data[4]}")
    ndim = data[5]
    if not 1 <= ndim <= 4:
        raise FormatError(f"ndim {ndim} out of range 1-4")
    off = 6
    if len(data) < off + 4 * ndim + 1:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    if any(d < 1 for d in dims):
        raise FormatError(f"zero extent in dims {dims}")
    code = data[off]
    off += 1
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise FormatError(f"unknown dtype code {code}")
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if len(data) - off != nbytes:
        raise FormatError(
            f"payload length {len(data) - off} != expected {nbytes} for dims {dims}"
        )
    arr = np.frombuffer(data[off:], dtype=dtype).reshape(dims)
    if code == 1:
        arr = arr.astype(np.float32, copy=True)
        if not np.isfinite(arr).all():
            raise FormatError("float payload contains NaN/Inf")
    else:
        arr = arr.copy()
    return arr


def _bilinear_taps(src: int, dst: int):
    """Half-pixel-center taps: per output index, two source indices + weights."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    w1 = pos - i0
    w0 = 1.0 - w1
    return i0, i1, w0, w1


def _nearest_taps(src: int, dst: int) -> np.ndarray:
    """Nearest-neighbor tap per output index; ties go to the smaller source index."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    idx = np.ceil(pos - 0.5).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize_bilinear(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a C x H x W float tensor with half-pixel-center bilinear sampling.

    Channels are resized independently; edges are clamped. The output dtype
    matches the input dtype (f32 or f64).
    """
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"target extent must be >= 1, got {out_h}x{out_w}")
    if t.ndim != 3:
        raise ArgumentError(f"expected C x H x W tensor, got shape {t.shape}")
    _, h, w = t.shape
    if h == out_h and w == out_w:
        return t.copy()
    work = t.astype(np.float64, copy=False)
    r0, r1, rw0, rw1 = _bilinear_taps(h, out_h)
    c0, c1, cw0, cw1 = _bilinear_taps(w, out_w)
    rows = work[:, r0, :] * rw0[None, :, None] + work[:, r1, :] * rw1[None, :, None]
    out = rows[:, :, c0] * cw0[None, None, :] + rows[:, :, c1] * cw1[None, None, :]
    return out.astype(t.dtype, copy=False)


def resize_bilinear_adjoint(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of :func:`resize_bilinear`: scatter-add output grads to sources.

    ``g`` is C x out_h x out_w; the result is C x in_h x in_w (float64).
    """
    ch, out_h, out_w = g.shape
    r0, r1, rw0, rw1 = _bilinear_taps(in_h, out_h)
    c0, c1, cw0, cw1 = _bilinear_taps(in_w, out_w)
    g = g.astype(np.float64, copy=False)
    cols = np.zeros((ch, out_h, in_w), dtype=np.float64)
    np.add.at(cols, (slice(None), slice(None), c0), g * cw0[None, None, :])
    np.add.at(cols, (slice(None), slice(None), c1), g * cw1[None, None, :])
    out = np.zeros((ch, in_h, in_w), dtype=np.float64)
    np.add.at(out, (slice(None), r0, slice(None)), cols * rw0[None, :, None])
    np.add.at(out, (slice(None), r1, slice(None)), cols * rw1[None, :, None])
    return out


def resize_nearest(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a H x W label mask with half-pixel-center nearest sampling.

    Labels are copied, never blended, so no new labels can appear.
    """
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"target extent must be >= 1, got {out_h}x{out_w}")
    if m.ndim != 2:
        raise ArgumentError(f"expected H x W mask, got shape {m.shape}")
    h, w = m.shape
    if h == out_h and w == out_w:
        return m.copy()
    ri = _nearest_taps(h, out_h)
    ci = _nearest_taps(w, out_w)
    return m[np.ix_(ri, ci)].copy()


def l2_normalize_channels(t: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale each spatial location's channel vector to unit L2 norm.

    Locations with norm < eps are left as all-zeros. Locations already within
    1e-7 of unit norm are passed through bit-exact, making the operation
    idempotent.
    """
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    if t.ndim != 3:
        raise ArgumentError(f"expected C x H x W tensor, got shape {t.shape}")
    norms = np.sqrt(np.sum(t.astype(np.float64, copy=False) ** 2, axis=0))
    out = t.astype(t.dtype, copy=True)
    tiny = norms < eps
    keep = np.abs(norms - 1.0) <= _UNIT_SKIP
    scale = np.where(tiny | keep, 1.0, norms)
    out = (out / scale[None, :, :]).astype(t.dtype, copy=False)
    out[:, tiny] = 0
    return out
