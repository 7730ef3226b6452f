"""Binary PPM (P6) and PGM (P5) raster IO, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class RasterError(ValueError):
    pass


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n%d %d\n255\n" % (width, height)


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is ``[H, W, 3]`` uint8."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise RasterError(f"write_ppm: expected uint8 [H,W,3], got {image.dtype} {image.shape}")
    Path(path).write_bytes(_header(b"P6", image.shape[1], image.shape[0]) + image.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise RasterError(f"write_pgm: expected uint8 [H,W], got {image.dtype} {image.shape}")
    Path(path).write_bytes(_header(b"P5", image.shape[1], image.shape[0]) + image.tobytes())


def _parse(data: bytes, magic: bytes, channels: int, path) -> np.ndarray:
    if not data.startswith(magic):
        raise RasterError(f"{path}: not a {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterError(f"{path}: truncated header")
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    if maxval != 255:
        raise RasterError(f"{path}: only 8-bit rasters are supported (maxval {maxval})")
    pos += 1
    n = width * height * channels
    if len(data) - pos < n:
        raise RasterError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data[pos:pos + n], dtype=np.uint8)
    return arr.reshape((height, width, channels) if channels > 1 else (height, width)).copy()


def read_ppm(path) -> np.ndarray:
    return _parse(Path(path).read_bytes(), b"P6", 3, path)


def read_pgm(path) -> np.ndarray:
    return _parse(Path(path).read_bytes(), b"P5", 1, path)
