"""NVOL1 volume files and intensity normalization.

Format: five header lines (`NVOL1`, `dims: X Y Z`, `spacing: sx sy sz`,
`channels: c`, `data: f32-le` or `data: u8`), one blank line, then the
raw payload, little-endian, x-fastest, channel-planar. Arrays in memory
are (Z, Y, X) or (C, Z, Y, X) C-order, so the payload is exactly the
array buffer; round-trips are bitwise.
"""

from __future__ import annotations

import numpy as np

MAX_PAYLOAD_BYTES = 1 << 31  # reject absurd headers before allocating


class VolumeFormatError(ValueError):
    """Malformed volume file; message carries file and line/offset."""


def write_volume(path, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    """3D (Z,Y,X) or 4D (C,Z,Y,X) array; bool/uint8 go out as u8,
    everything else as f32-le."""
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected a 3D or 4D array, got shape {arr.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    c, z, y, x = arr.shape
    if arr.dtype == bool or arr.dtype == np.uint8:
        payload = np.ascontiguousarray(arr, dtype=np.uint8)
        kind = "u8"
    else:
        payload = np.ascontiguousarray(arr.astype("<f4", copy=False))
        kind = "f32-le"
    header = (f"NVOL1\ndims: {x} {y} {z}\nspacing: {spacing[0]} {spacing[1]} {spacing[2]}\n"
              f"channels: {c}\ndata: {kind}\n\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes())


def _parse_header_line(raw: bytes, lineno: int, path, key: str, n_vals: int, cast):
    text = raw.decode("ascii", errors="replace").rstrip("\n")
    prefix = f"{key}:"
    if not text.startswith(prefix):
        raise VolumeFormatError(f"{path}: line {lineno}: expected '{key}: ...', got {text!r}")
    parts = text[len(prefix):].split()
    if len(parts) != n_vals:
        raise VolumeFormatError(
            f"{path}: line {lineno}: '{key}' needs {n_vals} value(s), got {len(parts)}")
    try:
        return [cast(p) for p in parts]
    except ValueError:
        raise VolumeFormatError(f"{path}: line {lineno}: cannot parse {parts!r} as {cast.__name__}")


def read_volume(path):
    """Returns (array, spacing); (Z,Y,X) when single-channel, else
    (C,Z,Y,X). u8 payloads come back as uint8."""
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic.rstrip(b"\n") != b"NVOL1":
            raise VolumeFormatError(f"{path}: line 1: bad magic {magic[:16]!r}, expected 'NVOL1'")
        x, y, z = _parse_header_line(fh.readline(), 2, path, "dims", 3, int)
        spacing = tuple(_parse_header_line(fh.readline(), 3, path, "spacing", 3, float))
        (c,) = _parse_header_line(fh.readline(), 4, path, "channels", 1, int)
        (kind,) = _parse_header_line(fh.readline(), 5, path, "data", 1, str)
        blank = fh.readline()
        if blank not in (b"\n", b"\r\n"):
            raise VolumeFormatError(f"{path}: line 6: expected a blank line before the payload")
        if min(x, y, z, c) < 1:
            raise VolumeFormatError(f"{path}: dims {x}x{y}x{z} channels {c} must be positive")
        if any(s <= 0 for s in spacing):
            raise VolumeFormatError(f"{path}: spacing must be positive, got {spacing}")
        if kind == "f32-le":
            dtype, isz = np.dtype("<f4"), 4
        elif kind == "u8":
            dtype, isz = np.dtype(np.uint8), 1
        else:
            raise VolumeFormatError(f"{path}: line 5: unknown data kind {kind!r}")
        count = c * z * y * x
        nbytes = count * isz
        if nbytes > MAX_PAYLOAD_BYTES:
            raise VolumeFormatError(f"{path}: payload of {nbytes} bytes exceeds the format limit")
        offset = fh.tell()
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise VolumeFormatError(
                f"{path}: payload truncated at offset {offset + len(payload)}: "
                f"expected {nbytes} bytes, found {len(payload)}")
        if fh.read(1):
            raise VolumeFormatError(f"{path}: trailing data after offset {offset + nbytes}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(c, z, y, x)
    arr = arr.copy()  # frombuffer views the bytes read-only; hand back owned memory
    return (arr[0] if c == 1 else arr), spacing


def normalize_intensity(v: np.ndarray, mode: str = "minmax") -> np.ndarray:
    """minmax to [0,1], zscore to mean 0 / std 1, or none (unchanged).
    Constant volumes map to all-zeros under both normalizations."""
    v = np.asarray(v)
    if mode == "none":
        return v.astype(np.float32, copy=False)
    w = v.astype(np.float64)
    if mode == "minmax":
        lo, hi = float(w.min()), float(w.max())
        if hi == lo:
            return np.zeros(v.shape, dtype=np.float32)
        return ((w - lo) / (hi - lo)).astype(np.float32)
    if mode == "zscore":
        mu, sd = float(w.mean()), float(w.std())
        if sd == 0.0:
            return np.zeros(v.shape, dtype=np.float32)
        return ((w - mu) / sd).astype(np.float32)
    raise ValueError(f"unknown normalization mode {mode!r}, expected minmax, zscore, or none")
