"""Volume file round trips, malformed-file rejection, normalization."""

import struct

import numpy as np
import pytest

from netreg.volio import (VolumeFormatError, normalize_intensity, read_volume,
                          write_volume)


def round_trip(tmp_path, arr, **kw):
    p = tmp_path / "v.nvol"
    write_volume(p, arr, **kw)
    return p, *read_volume(p)


class TestRoundTrip:
    def test_f32_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((5, 6, 7)).astype(np.float32)
        _, back, spacing = round_trip(tmp_path, arr)
        assert back.dtype == np.float32 and back.shape == (5, 6, 7)
        assert back.tobytes() == arr.tobytes()
        assert spacing == (1.0, 1.0, 1.0)

    def test_bool_goes_u8(self, tmp_path):
        arr = np.zeros((3, 4, 5), dtype=bool)
        arr[1, 2, 3] = True
        _, back, _ = round_trip(tmp_path, arr)
        assert back.dtype == np.uint8
        assert np.array_equal(back, arr.astype(np.uint8))

    def test_uint8_survives(self, tmp_path):
        arr = np.arange(60, dtype=np.uint8).reshape(3, 4, 5)
        _, back, _ = round_trip(tmp_path, arr)
        assert np.array_equal(back, arr)

    def test_4d_field(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.standard_normal((3, 4, 5, 6)).astype(np.float32)
        _, back, _ = round_trip(tmp_path, arr)
        assert back.shape == (3, 4, 5, 6)
        assert back.tobytes() == arr.tobytes()

    def test_f64_written_as_f32(self, tmp_path):
        arr = np.array([[[0.1, 0.2]]], dtype=np.float64)
        _, back, _ = round_trip(tmp_path, arr)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr.astype(np.float32))

    def test_spacing_round_trip(self, tmp_path):
        arr = np.zeros((2, 2, 2), dtype=np.float32)
        _, _, spacing = round_trip(tmp_path, arr, spacing=(0.5, 0.7, 2.0))
        assert spacing == (0.5, 0.7, 2.0)

    def test_result_is_writable(self, tmp_path):
        _, back, _ = round_trip(tmp_path, np.zeros((2, 2, 2), dtype=np.float32))
        back[0, 0, 0] = 5.0  # must not raise: reader owns its memory


class TestFileLayout:
    def test_golden_bytes(self, tmp_path):
        p = tmp_path / "one.nvol"
        write_volume(p, np.array([[[1.0]]], dtype=np.float32))
        want = (b"NVOL1\ndims: 1 1 1\nspacing: 1.0 1.0 1.0\n"
                b"channels: 1\ndata: f32-le\n\n" + struct.pack("<f", 1.0))
        assert p.read_bytes() == want

    def test_payload_is_x_fastest(self, tmp_path):
        # (Z, Y, X) C-order memory means x varies fastest in the payload
        arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        p = tmp_path / "v.nvol"
        write_volume(p, arr)
        payload = p.read_bytes().split(b"\n\n", 1)[1]
        assert payload == arr.astype("<f4").tobytes()

    def test_write_rejects_2d(self, tmp_path):
        with pytest.raises(ValueError):
            write_volume(tmp_path / "v.nvol", np.zeros((4, 4), dtype=np.float32))

    def test_write_rejects_bad_spacing(self, tmp_path):
        with pytest.raises(ValueError):
            write_volume(tmp_path / "v.nvol", np.zeros((2, 2, 2), dtype=np.float32),
                         spacing=(1.0, 0.0, 1.0))


def good_file(tmp_path):
    p = tmp_path / "v.nvol"
    write_volume(p, np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    return p


class TestMalformed:
    def test_bad_magic(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(b"NVOL2" + p.read_bytes()[5:])
        with pytest.raises(VolumeFormatError, match="magic"):
            read_volume(p)

    def test_wrong_value_count(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(p.read_bytes().replace(b"dims: 2 2 2", b"dims: 2 2"))
        with pytest.raises(VolumeFormatError, match="line 2"):
            read_volume(p)

    def test_non_integer_dims(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(p.read_bytes().replace(b"dims: 2 2 2", b"dims: a 2 2"))
        with pytest.raises(VolumeFormatError, match="line 2"):
            read_volume(p)

    def test_missing_blank_line(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(p.read_bytes().replace(b"f32-le\n\n", b"f32-le\n", 1))
        with pytest.raises(VolumeFormatError, match="line 6"):
            read_volume(p)

    def test_unknown_data_kind(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(p.read_bytes().replace(b"data: f32-le", b"data: f16-le"))
        with pytest.raises(VolumeFormatError, match="kind"):
            read_volume(p)

    def test_truncated_payload_reports_offset(self, tmp_path):
        p = good_file(tmp_path)
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(VolumeFormatError, match="truncated at offset"):
            read_volume(p)

    def test_trailing_data(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(p.read_bytes() + b"x")
        with pytest.raises(VolumeFormatError, match="trailing"):
            read_volume(p)

    def test_payload_limit_checked_before_alloc(self, tmp_path):
        p = tmp_path / "huge.nvol"
        p.write_bytes(b"NVOL1\ndims: 100000 100000 100000\nspacing: 1.0 1.0 1.0\n"
                      b"channels: 1\ndata: f32-le\n\n")
        with pytest.raises(VolumeFormatError, match="limit"):
            read_volume(p)

    def test_zero_dim_rejected(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(p.read_bytes().replace(b"dims: 2 2 2", b"dims: 0 2 2"))
        with pytest.raises(VolumeFormatError, match="positive"):
            read_volume(p)

    def test_nonpositive_spacing_rejected(self, tmp_path):
        p = good_file(tmp_path)
        p.write_bytes(p.read_bytes().replace(b"spacing: 1.0 1.0 1.0",
                                             b"spacing: 1.0 -1.0 1.0"))
        with pytest.raises(VolumeFormatError, match="spacing"):
            read_volume(p)


class TestNormalize:
    def test_minmax_exact(self):
        v = np.array([2.0, 3.0, 4.0], dtype=np.float32)
        out = normalize_intensity(v, "minmax")
        assert out.dtype == np.float32
        assert np.array_equal(out, np.array([0.0, 0.5, 1.0], dtype=np.float32))

    def test_zscore_moments(self):
        rng = np.random.default_rng(2)
        v = rng.normal(5.0, 3.0, (8, 8, 8))
        out = normalize_intensity(v, "zscore")
        assert abs(float(out.mean())) < 1e-6
        assert abs(float(out.std()) - 1.0) < 1e-5

    def test_constant_maps_to_zeros(self):
        v = np.full((4, 4, 4), 7.0)
        for mode in ("minmax", "zscore"):
            assert np.array_equal(normalize_intensity(v, mode), np.zeros_like(v, dtype=np.float32))

    def test_none_passthrough(self):
        v = np.array([1.0, -2.0], dtype=np.float32)
        out = normalize_intensity(v, "none")
        assert out.dtype == np.float32
        assert np.array_equal(out, v)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown normalization"):
            normalize_intensity(np.zeros(3), "median")
