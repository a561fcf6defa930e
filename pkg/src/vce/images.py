"""Lossless grayscale image I/O with byte-deterministic output.

Writers emit exactly the same bytes for the same pixels on every run: the PNG
path uses a single IDAT chunk compressed at a fixed zlib level, the PGM path is
plain big-endian P5/P2. Reading goes through Pillow so any common input format
works for ingestion and the convert command.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["write_png_gray", "write_pgm", "read_gray", "to_u8", "DecodeError"]


class DecodeError(ValueError):
    """Input file could not be decoded as an image."""


def to_u8(pixels: np.ndarray) -> np.ndarray:
    """Map float [0,1] (or pass through u8) to uint8 0-255."""
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8:
        return arr
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(payload, zlib.crc32(tag))
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def write_png_gray(path, pixels: np.ndarray) -> None:
    """Write an 8-bit grayscale PNG (color type 0, no filtering)."""
    arr = to_u8(pixels)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D grayscale array, got shape {arr.shape}")
    h, w = arr.shape
    raw = b"".join(b"\x00" + arr[i].tobytes() for i in range(h))
    out = bytearray(b"\x89PNG\r\n\x1a\n")
    out += _png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
    out += _png_chunk(b"IDAT", zlib.compress(raw, 6))
    out += _png_chunk(b"IEND", b"")
    Path(path).write_bytes(bytes(out))


def write_pgm(path, pixels: np.ndarray, binary: bool = True) -> None:
    """Write a PGM file, binary P5 or ASCII P2."""
    arr = to_u8(pixels)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D grayscale array, got shape {arr.shape}")
    h, w = arr.shape
    if binary:
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        Path(path).write_bytes(header + arr.tobytes())
    else:
        lines = [f"P2\n{w} {h}\n255"]
        lines += [" ".join(str(int(v)) for v in row) for row in arr]
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_gray(path) -> np.ndarray:
    """Decode any Pillow-readable image to a uint8 grayscale array."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image file {path}: {exc}") from exc
