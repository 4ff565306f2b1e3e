"""8-bit image I/O: PGM (P5) as the portable baseline, PPM (P6) for the
optional color path, PNG via Pillow when it is installed.

RGB is reduced to grayscale with the Rec.601 luma weights.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataError

_REC601 = np.array([0.299, 0.587, 0.114])


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma, rounded to uint8."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected H*W*3 RGB array, got shape {rgb.shape}")
    gray = rgb.astype(np.float64) @ _REC601
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def _read_pnm_header(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Returns (magic, width, height, maxval, data_offset)."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    pos = 2
    fields = []
    while len(fields) < 3:
        # Skip whitespace and '#' comment lines between header fields.
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        m = re.match(rb"\d+", data[pos:])
        if not m:
            raise DataError(f"{path}: malformed PNM header")
        fields.append(int(m.group()))
        pos += m.end()
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DataError(f"{path}: malformed PNM header")
    pos += 1  # single whitespace byte before raster data
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit (maxval 255) images supported")
    return magic, width, height, maxval, pos


def read_image(path) -> np.ndarray:
    """Read PGM/PPM/PNG to uint8 [H,W] (gray) or [H,W,3] (color)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return _read_png(path)
    data = path.read_bytes()
    magic, width, height, _, offset = _read_pnm_header(data, path)
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise DataError(
            f"{path}: truncated raster ({len(raster)} of {expected} bytes)"
        )
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def _read_png(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is a test dep
        raise DataError(
            f"{path}: PNG support requires Pillow (pip install printkind[png])"
        ) from exc
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.uint8).copy()
        rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return rgb


def write_image(path, pixels: np.ndarray) -> None:
    """Write uint8 [H,W] as PGM (P5) or [H,W,3] as PPM (P6)."""
    path = Path(path)
    if pixels.dtype != np.uint8:
        raise DataError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"expected [H,W] or [H,W,3] pixels, got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + np.ascontiguousarray(pixels).tobytes())
    tmp.replace(path)


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """Pass through gray images, reduce RGB via Rec.601."""
    if pixels.ndim == 2:
        return pixels
    return rgb_to_gray(pixels)
