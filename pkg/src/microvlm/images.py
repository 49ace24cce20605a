"""Binary PPM (P6, maxval 255) decode/encode and model-input normalization.

PPM is the sole on-disk image format: trivially parseable, bit-exact, and
dependency free. The model consumes 64x64x3 float arrays in [-1, 1] produced
by nearest-neighbor resampling plus a single global scale.
"""

from __future__ import annotations

import numpy as np

IMAGE_SIDE = 64


class PpmFormatError(ValueError):
    """Input is not a binary P6 PPM."""


class PpmMaxvalError(ValueError):
    """PPM maxval is not 255."""


class PpmTruncatedError(ValueError):
    """PPM payload is shorter than the header promises."""


def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PpmTruncatedError("unexpected end of PPM header")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Pixel-exact decode of a binary PPM into a uint8 array [H, W, 3]."""
    if data[:2] != b"P6":
        raise PpmFormatError(f"unsupported format magic {data[:2]!r}, expected b'P6'")
    pos = 2
    width_tok, pos = _read_header_token(data, pos)
    height_tok, pos = _read_header_token(data, pos)
    maxval_tok, pos = _read_header_token(data, pos)
    try:
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ValueError as exc:
        raise PpmFormatError(f"malformed PPM header field: {exc}") from exc
    if width <= 0 or height <= 0:
        raise PpmFormatError(f"non-positive image extent {width}x{height}")
    if maxval != 255:
        raise PpmMaxvalError(f"maxval {maxval} unsupported, expected 255")
    pos += 1  # single whitespace byte separates header from payload
    expected = width * height * 3
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise PpmTruncatedError(
            f"payload holds {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Serialize a uint8 [H, W, 3] array as binary P6, maxval 255."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] pixels, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()


def normalize(raw: np.ndarray) -> np.ndarray:
    """Nearest-neighbor resample to 64x64, then map [0, 255] to [-1, 1]."""
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty [H, W, 3] image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    rows = (np.arange(IMAGE_SIDE) * h) // IMAGE_SIDE
    cols = (np.arange(IMAGE_SIDE) * w) // IMAGE_SIDE
    resampled = arr[rows][:, cols].astype(np.float64)
    return resampled / 127.5 - 1.0


def load_image(path) -> np.ndarray:
    """Read a PPM file and normalize it to the model's input tensor."""
    with open(path, "rb") as f:
        return normalize(decode_ppm(f.read()))
