"""Sign image record and the netpbm (P5/P6) formats used for interchange."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLEAN = "clean"
MOTION_BLUR = "motion-blur"
OCCLUDED = "occluded"
COMBINED = "combined"
TAGS = (CLEAN, MOTION_BLUR, OCCLUDED, COMBINED)

IMAGE_SHAPE = (3, 48, 48)


@dataclass(frozen=True)
class SignImage:
    pixels: np.ndarray  # 3 x 48 x 48 float64 in [0, 1]
    class_id: int
    tag: str = CLEAN
    source_id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.shape != IMAGE_SHAPE:
            raise ValueError(f"sign image must be {IMAGE_SHAPE}, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("sign image pixels must lie in [0, 1]")
        if self.tag not in TAGS:
            raise ValueError(f"unknown corruption tag {self.tag!r}")


class PPMError(ValueError):
    pass


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("truncated netpbm header")
        try:
            out.append(int(buf[start:pos]))
        except ValueError as exc:
            raise PPMError(f"bad netpbm header token {buf[start:pos]!r}") from exc
    return out, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    """Read a binary P6 (colour) or P5 (grey) file as a uint8 C x H x W array."""
    path = Path(path)
    buf = path.read_bytes()
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise PPMError(f"{path}: not a binary PPM/PGM file (magic {magic!r})")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    if not 0 < maxval < 256:
        raise PPMError(f"{path}: only 8-bit maxval is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise PPMError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels).transpose(2, 0, 1)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return np.ascontiguousarray(arr)


def ppm_size(path) -> tuple[int, int]:
    """(width, height) from a netpbm header without decoding the raster."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    if head[:2] not in (b"P6", b"P5"):
        raise PPMError(f"{path}: not a binary PPM/PGM file")
    (w, h), _ = _tokens(head, 2, 2)
    return w, h


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write a 3 x H x W image (floats in [0, 1] or uint8) as binary P6."""
    arr = pixels if pixels.dtype == np.uint8 else to_uint8(pixels)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"PPM needs a 3 x H x W array, got {arr.shape}")
    _, h, w = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an H x W uint8 array as binary P5."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def save_ppm(path, image: SignImage) -> None:
    write_ppm(path, image.pixels)
