"""Corruption and geometric augmentation for 3x48x48 sign images.

All operations are pure functions of (image, parameters, seed).  Images are
float arrays in [0, 1]; outputs are clipped back into that range.  Resampling
is bilinear with edge replication for out-of-frame coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .image import CLEAN, COMBINED, MOTION_BLUR, OCCLUDED, SignImage

MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class AugmentConfig:
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.25)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    blur_p: float = 0.5
    blur_length: tuple[int, int] = (5, 10)
    blur_angle: tuple[float, float] = (0.0, 180.0)
    rotate_p: float = 0.5
    rotate_range: tuple[float, float] = (-20.0, 20.0)
    scale_p: float = 0.3
    scale_range: tuple[int, int] = (20, 200)
    perspective_p: float = 0.3
    perspective_jitter: float = 0.10
    blend_p: float = 0.0
    blend_noise: float = 0.02

    def __post_init__(self):
        for name in ("erase_p", "blur_p", "rotate_p", "scale_p", "perspective_p", "blend_p"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be a probability, got {p}")
        lo, hi = self.erase_area
        if not 0 < lo <= hi < 1:
            raise ValueError(f"erase area range must satisfy 0 < lo <= hi < 1, got {self.erase_area}")
        for name in ("erase_aspect", "blur_length", "blur_angle", "rotate_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {(lo, hi)}")
        if self.erase_aspect[0] <= 0:
            raise ValueError("erase aspect ratios must be positive")
        if self.blur_length[0] < 1:
            raise ValueError("blur length must be at least 1 pixel")
        if self.scale_range[0] < 1:
            raise ValueError("scale sizes must be at least 1 pixel")
        if not 0 <= self.perspective_jitter <= 0.25:
            raise ValueError(f"perspective jitter must lie in [0, 0.25], got {self.perspective_jitter}")

    @classmethod
    def off(cls, **overrides) -> "AugmentConfig":
        """A config with every random step disabled."""
        base = dict(erase_p=0.0, blur_p=0.0, rotate_p=0.0, scale_p=0.0, perspective_p=0.0, blend_p=0.0)
        base.update(overrides)
        return cls(**base)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _with(image: SignImage, pixels: np.ndarray, tag: str | None = None) -> SignImage:
    return replace(image, pixels=np.clip(pixels, 0.0, 1.0), tag=image.tag if tag is None else tag)


def merge_tag(old: str, new: str) -> str:
    if old == CLEAN:
        return new
    if new == CLEAN or old == new:
        return old
    return COMBINED


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------

def bilinear_sample(pixels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample C x H x W ``pixels`` at fractional (rows, cols); edges replicate."""
    _, h, w = pixels.shape
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = pixels[:, r0, c0] * (1 - fc) + pixels[:, r0, c1] * fc
    bot = pixels[:, r1, c0] * (1 - fc) + pixels[:, r1, c1] * fc
    return top * (1 - fr) + bot * fr


def resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment."""
    _, h, w = pixels.shape
    ho, wo = size
    if (ho, wo) == (h, w):
        return pixels.astype(np.float64, copy=True)
    rows = (np.arange(ho) + 0.5) * (h / ho) - 0.5
    cols = (np.arange(wo) + 0.5) * (w / wo) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return bilinear_sample(pixels.astype(np.float64), rr, cc)


# ---------------------------------------------------------------------------
# individual operations
# ---------------------------------------------------------------------------

def erase_box(shape: tuple[int, int], config: AugmentConfig, rng: np.random.Generator):
    """Draw an in-bounds rectangle (top, left, height, width) or None after MAX_ATTEMPTS."""
    h, w = shape
    area = h * w
    lo, hi = config.erase_area
    alo, ahi = config.erase_aspect
    for _ in range(MAX_ATTEMPTS):
        target = rng.uniform(lo, hi) * area
        aspect = math.exp(rng.uniform(math.log(alo), math.log(ahi)))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if not (1 <= eh <= h and 1 <= ew <= w):
            continue
        if not lo <= eh * ew / area <= hi or not alo <= eh / ew <= ahi:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        return top, left, eh, ew
    return None


def random_erase(image: SignImage, config: AugmentConfig = AugmentConfig(), seed=None) -> SignImage:
    """With probability ``erase_p`` overwrite one random rectangle with uniform noise."""
    rng = _rng(seed)
    if rng.random() >= config.erase_p:
        return image
    return _erase_with(image, config, rng)


def _erase_with(image: SignImage, config: AugmentConfig, rng: np.random.Generator) -> SignImage:
    box = erase_box(image.pixels.shape[1:], config, rng)
    if box is None:
        return image
    top, left, eh, ew = box
    out = image.pixels.copy()
    out[:, top:top + eh, left:left + ew] = rng.random((out.shape[0], eh, ew))
    return _with(image, out, merge_tag(image.tag, OCCLUDED))


def blur_kernel(length: int, angle: float) -> np.ndarray:
    """Normalised line kernel covering ``length`` pixels along its major axis.

    The line is rasterised DDA-style: consecutive points step one pixel along
    whichever axis the direction favours, so exactly ``length`` cells get
    weight ``1/length``.
    """
    length = int(length)
    if length < 1:
        raise ValueError(f"blur length must be >= 1, got {length}")
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)  # image rows grow downwards
    step = max(abs(dx), abs(dy))
    dx, dy = dx / step, dy / step
    offsets = np.arange(length) - (length - 1) / 2.0
    xs = np.floor(offsets * dx + 0.5).astype(int)
    ys = np.floor(offsets * dy + 0.5).astype(int)
    radius = int(max(np.abs(xs).max(), np.abs(ys).max()))
    size = 2 * radius + 1
    kernel = np.zeros((size, size))
    np.add.at(kernel, (ys + radius, xs + radius), 1.0)
    # trim empty border rows/columns in symmetric pairs so the centre stays put
    while kernel.shape[0] > 1 and not kernel[0].any() and not kernel[-1].any():
        kernel = kernel[1:-1]
    while kernel.shape[1] > 1 and not kernel[:, 0].any() and not kernel[:, -1].any():
        kernel = kernel[:, 1:-1]
    return kernel / kernel.sum()


def convolve_edge(pixels: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D convolution with edge-replicated borders."""
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    _, h, w = pixels.shape
    padded = np.pad(pixels, ((0, 0), (ry, ry), (rx, rx)), mode="edge")
    out = np.zeros_like(pixels, dtype=np.float64)
    for y, x in zip(*np.nonzero(kernel)):
        # convolution flips the kernel
        sy, sx = kh - 1 - y, kw - 1 - x
        out += kernel[y, x] * padded[:, sy:sy + h, sx:sx + w]
    return out


def motion_blur(image: SignImage, length: int, angle: float) -> SignImage:
    kernel = blur_kernel(length, angle)
    return _with(image, convolve_edge(image.pixels, kernel), merge_tag(image.tag, MOTION_BLUR))


def rotate(image: SignImage, angle: float) -> SignImage:
    """Rotate about the image centre; a positive angle turns row r, column c towards (c, W-1-r)."""
    quarter = angle / 90.0
    if abs(quarter - round(quarter)) < 1e-12:
        # lattice-exact case, no interpolation
        turns = int(round(quarter)) % 4
        return _with(image, np.rot90(image.pixels, k=-turns, axes=(1, 2)).copy())
    _, h, w = image.pixels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle)
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_r = rr * math.cos(t) - cc * math.sin(t) + cy
    src_c = rr * math.sin(t) + cc * math.cos(t) + cx
    return _with(image, bilinear_sample(image.pixels, src_r, src_c))


def scale_resize(image, target: int = 48, seed=None, size_range: tuple[int, int] = (20, 200)):
    """Resize to ``target x target``.

    With ``seed=None`` this is a direct resize (ingestion normalisation) and
    accepts a raw C x H x W array or a SignImage.  With a seed the image first
    makes a round trip through a random intermediate size from ``size_range``.
    """
    pixels = image.pixels if isinstance(image, SignImage) else np.asarray(image, dtype=np.float64)
    if pixels.ndim != 3 or min(pixels.shape[1:]) < 1:
        raise ValueError(f"expected a C x H x W image, got shape {pixels.shape}")
    if seed is not None:
        s = int(_rng(seed).integers(size_range[0], size_range[1] + 1))
        pixels = resize(pixels, (s, s))
    out = resize(pixels, (target, target))
    if isinstance(image, SignImage):
        return _with(image, out)
    return np.clip(out, 0.0, 1.0)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending four (x, y) points ``src`` onto ``dst``."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(hmat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    homo = np.hstack([pts, np.ones((len(pts), 1))]) @ hmat.T
    return homo[:, :2] / homo[:, 2:3]


def _convex(quad: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        p0, p1, p2 = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        cross = (p1[0] - p0[0]) * (p2[1] - p1[1]) - (p1[1] - p0[1]) * (p2[0] - p1[0])
        signs.append(np.sign(cross))
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)


def image_corners(h: int, w: int) -> np.ndarray:
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def warp_perspective(image: SignImage, dst_corners: np.ndarray) -> SignImage:
    """Warp so the image corners land on ``dst_corners`` (x, y order: TL, TR, BR, BL)."""
    _, h, w = image.pixels.shape
    src = image_corners(h, w)
    if np.allclose(dst_corners, src):
        return _with(image, image.pixels.copy())
    inv = homography(np.asarray(dst_corners, dtype=np.float64), src)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    mapped = apply_homography(inv, np.stack([xx.ravel(), yy.ravel()], axis=1))
    return _with(image, bilinear_sample(image.pixels, mapped[:, 1].reshape(h, w), mapped[:, 0].reshape(h, w)))


def jitter_corners(shape: tuple[int, int], jitter: float, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    src = image_corners(h, w)
    if jitter == 0:
        return src
    reach = jitter * max(h, w)
    for _ in range(MAX_ATTEMPTS):
        dst = src + rng.uniform(-reach, reach, size=src.shape)
        if _convex(dst):
            return dst
    return src


def perspective_jitter(image: SignImage, jitter: float = 0.10, seed=None) -> SignImage:
    """Move each corner independently by up to ``jitter * 48`` pixels and warp."""
    if not 0 <= jitter <= 0.25:
        raise ValueError(f"perspective jitter must lie in [0, 0.25], got {jitter}")
    dst = jitter_corners(image.pixels.shape[1:], jitter, _rng(seed))
    return warp_perspective(image, dst)


def procedural_background(shape: tuple[int, int], seed=None) -> np.ndarray:
    """Smooth colour texture built from a few random low-frequency waves."""
    rng = _rng(seed)
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.empty((3, h, w))
    base = rng.uniform(0.2, 0.8, size=3)
    for ch in range(3):
        field = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 4.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        out[ch] = base[ch] + 0.1 * field
    return np.clip(out, 0.0, 1.0)


def blend_template(image: SignImage, background: np.ndarray, mask: np.ndarray | None = None,
                   noise: float = 0.02, seed=None) -> SignImage:
    """Paste the sign onto ``background``; the default mask is every pixel unlike the corner colour."""
    rng = _rng(seed)
    px = image.pixels
    if mask is None:
        corner = px[:, 0, 0][:, None, None]
        mask = np.abs(px - corner).max(axis=0) > 0.05
    out = np.where(mask[None], px, background)
    if noise > 0:
        out = out + rng.normal(0.0, noise, size=out.shape)
    return _with(image, out)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def compose_augment(image: SignImage, config: AugmentConfig = AugmentConfig(), seed=None,
                    steps: list | None = None) -> SignImage:
    """Rotation, scale round trip, perspective and background blend, each optional,
    then motion blur and/or random erasing.

    Every step draws its coin from the same seeded stream in a fixed order, so
    the result is a pure function of (image, config, seed).  If ``steps`` is a
    list, ``(name, image after that step)`` is appended for every applied step.
    """
    rng = _rng(seed)
    coins = rng.random(7)
    out = image
    log = steps if steps is not None else []
    if coins[0] < config.rotate_p:
        out = rotate(out, rng.uniform(*config.rotate_range))
        log.append(("rotate", out))
    if coins[1] < config.scale_p:
        out = scale_resize(out, out.pixels.shape[-1], seed=rng, size_range=config.scale_range)
        log.append(("scale", out))
    if coins[2] < config.perspective_p:
        out = perspective_jitter(out, config.perspective_jitter, seed=rng)
        log.append(("perspective", out))
    if coins[3] < config.blend_p:
        out = blend_template(out, procedural_background(out.pixels.shape[1:], rng), noise=config.blend_noise, seed=rng)
        log.append(("blend", out))
    if coins[4] < config.blur_p:
        length = int(rng.integers(config.blur_length[0], config.blur_length[1] + 1))
        out = motion_blur(out, length, rng.uniform(*config.blur_angle))
        log.append(("blur", out))
    if coins[5] < config.erase_p:
        out = _erase_with(out, config, rng)
        log.append(("erase", out))
    return out
