"""Binary PPM (P6) and PGM (P5) codec, byte-exact for 8-bit data.

Only maxval 255 is supported. Comments (# ...) are accepted in headers on
read; writes emit the canonical three-token header with single newlines so
encode(decode(encode(x))) is byte-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header")
    return data[start:pos], pos


def _decode(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    pos = 2
    try:
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        max_tok, pos = _read_token(data, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval")
    pos += 1
    expected = width * height * channels
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise FormatError(f"truncated payload: got {len(payload)} of {expected} bytes")
    if len(data) > pos + expected:
        raise FormatError("trailing bytes after pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, channels)


def decode_ppm(data: bytes) -> np.ndarray:
    """P6 bytes -> (H, W, 3) uint8."""
    return _decode(data, b"P6", 3)


def decode_pgm(data: bytes) -> np.ndarray:
    """P5 bytes -> (H, W) uint8."""
    return _decode(data, b"P5", 1)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise FormatError(f"expected (H,W,3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise FormatError(f"expected (H,W) uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def read_pnm(path) -> np.ndarray:
    """Decode a .ppm/.pgm file by its magic; returns uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:2] == b"P5":
        return decode_pgm(data)
    raise FormatError(f"unknown image magic {data[:2]!r} in {path}")


def write_pnm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    data = encode_ppm(pixels) if pixels.ndim == 3 else encode_pgm(pixels)
    with open(path, "wb") as fh:
        fh.write(data)
