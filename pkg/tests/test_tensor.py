"""Tensor container round-trips, resize kernels, channel normalization."""

import numpy as np
import pytest

from cyclematch.errors import ArgumentError, FormatError
from cyclematch.tensor import (
    decode_tensor,
    encode_tensor,
    l2_normalize_channels,
    read_tensor,
    resize_bilinear,
    resize_nearest,
    write_tensor,
)


def test_round_trip_f32_zeros(tmp_path):
    p = tmp_path / "z.cstf"
    arr = np.zeros((2, 3), dtype=np.float32)
    write_tensor(p, arr)
    back = read_tensor(p)
    assert back.shape == (2, 3)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_round_trip_u8_scalar(tmp_path):
    p = tmp_path / "s.cstf"
    write_tensor(p, np.array([7], dtype=np.uint8))
    back = read_tensor(p)
    assert back.shape == (1,)
    assert back[0] == 7


def test_round_trip_fuzz_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        ndim = int(rng.integers(1, 5))
        dims = tuple(int(rng.integers(1, 6)) for _ in range(ndim))
        if rng.random() < 0.5:
            arr = rng.standard_normal(dims).astype(np.float32)
        else:
            arr = rng.integers(0, 256, size=dims).astype(np.uint8)
        p = tmp_path / f"t{i}.cstf"
        write_tensor(p, arr)
        raw1 = p.read_bytes()
        back = read_tensor(p)
        assert np.array_equal(back, arr)
        assert back.dtype == arr.dtype
        # re-serialization is byte-identical
        assert encode_tensor(back) == raw1


def test_header_layout():
    raw = encode_tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert raw[:4] == b"CSTF"
    assert raw[4] == 1  # version
    assert raw[5] == 2  # ndim
    assert raw[6:14] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[14] == 1  # f32 dtype code
    assert len(raw) == 15 + 12


def test_bad_magic():
    with pytest.raises(FormatError):
        decode_tensor(b"NOPE" + bytes(20))


def test_truncated_payload():
    raw = encode_tensor(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(FormatError):
        decode_tensor(raw[:-3])


def test_bad_dtype_code():
    raw = bytearray(encode_tensor(np.zeros(3, dtype=np.uint8)))
    raw[10] = 9  # dtype byte for a 1-d tensor
    with pytest.raises(FormatError):
        decode_tensor(bytes(raw))


def test_nan_payload_rejected(tmp_path):
    arr = np.zeros(3, dtype=np.float32)
    with pytest.raises(ArgumentError):
        encode_tensor(arr * np.nan)
    raw = bytearray(encode_tensor(arr))
    raw[-4:] = np.array([np.inf], dtype="<f4").tobytes()
    with pytest.raises(FormatError):
        decode_tensor(bytes(raw))


def test_resize_bilinear_identity():
    rng = np.random.default_rng(1)
    t = rng.standard_normal((2, 5, 7)).astype(np.float32)
    out = resize_bilinear(t, 5, 7)
    assert np.array_equal(out, t)


def test_resize_bilinear_2x2_to_1x1_is_mean():
    t = np.array([[[1.0, 3.0], [5.0, 7.0]]], dtype=np.float32)
    out = resize_bilinear(t, 1, 1)
    assert out.shape == (1, 1, 1)
    assert abs(float(out[0, 0, 0]) - 4.0) < 1e-6


def _scalar_bilinear(img, out_h, out_w):
    """Independent scalar reference: half-pixel centers, clamped edges."""
    h, w = len(img), len(img[0])
    out = [[0.0] * out_w for _ in range(out_h)]
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
            bot = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
            out[i][j] = top * (1 - fy) + bot * fy
    return out


def test_resize_bilinear_matches_scalar_reference():
    rng = np.random.default_rng(2)
    t = rng.standard_normal((1, 8, 8)).astype(np.float32)
    out = resize_bilinear(t, 4, 4)
    ref = _scalar_bilinear(t[0].tolist(), 4, 4)
    assert np.abs(out[0] - np.array(ref)).max() < 1e-6


def test_resize_bilinear_constant_exact():
    t = np.full((3, 5, 4), 2.5, dtype=np.float32)
    for oh, ow in ((1, 1), (7, 9), (2, 8)):
        out = resize_bilinear(t, oh, ow)
        assert np.array_equal(out, np.full((3, oh, ow), 2.5, dtype=np.float32))


def test_resize_zero_extent_rejected():
    t = np.zeros((1, 2, 2), dtype=np.float32)
    with pytest.raises(ArgumentError):
        resize_bilinear(t, 0, 2)
    with pytest.raises(ArgumentError):
        resize_nearest(np.zeros((2, 2), dtype=np.uint8), 2, 0)


def test_resize_nearest_identity():
    m = np.arange(12, dtype=np.uint8).reshape(3, 4)
    assert np.array_equal(resize_nearest(m, 3, 4), m)


def test_resize_nearest_tie_toward_smaller_index():
    m = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    out = resize_nearest(m, 1, 1)
    assert out[0, 0] == 1  # source coord 0.5 ties to index 0


def test_resize_nearest_matches_brute_force():
    rng = np.random.default_rng(3)
    m = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
    out = resize_nearest(m, 7, 7)
    for i in range(7):
        for j in range(7):
            sy = (i + 0.5) * 16 / 7 - 0.5
            sx = (j + 0.5) * 16 / 7 - 0.5
            # nearest with ties toward the smaller source index
            best_y = min(range(16), key=lambda y: (abs(y - sy), y))
            best_x = min(range(16), key=lambda x: (abs(x - sx), x))
            assert out[i, j] == m[best_y, best_x]


def test_resize_nearest_no_new_labels():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = rng.integers(0, 5, size=(9, 11)).astype(np.uint8)
        out = resize_nearest(m, int(rng.integers(1, 20)), int(rng.integers(1, 20)))
        assert set(np.unique(out)) <= set(np.unique(m))


def test_l2_normalize_basic():
    t = np.zeros((2, 1, 1), dtype=np.float32)
    t[0, 0, 0], t[1, 0, 0] = 3.0, 4.0
    out = l2_normalize_channels(t)
    assert np.allclose(out[:, 0, 0], [0.6, 0.8], atol=1e-7)


def test_l2_normalize_zero_guard():
    t = np.zeros((4, 2, 2), dtype=np.float32)
    out = l2_normalize_channels(t)
    assert np.array_equal(out, t)


def test_l2_normalize_norm_scan():
    rng = np.random.default_rng(5)
    t = rng.standard_normal((6, 9, 9)).astype(np.float32)
    t[:, 0, 0] = 0.0
    out = l2_normalize_channels(t)
    norms = np.sqrt((out.astype(np.float64) ** 2).sum(axis=0))
    for n in norms.reshape(-1):
        assert n == 0.0 or abs(n - 1.0) < 1e-5


def test_l2_normalize_idempotent():
    rng = np.random.default_rng(6)
    t = rng.standard_normal((5, 6, 6)).astype(np.float32) * 10
    once = l2_normalize_channels(t)
    twice = l2_normalize_channels(once)
    assert np.array_equal(once, twice)
