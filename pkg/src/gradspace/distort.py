"""Synthetic challenge generators with five ordered severity levels.

Level 0 is the identity for every kind. The ladders below are fixed so that
regression fixtures stay valid; changing one is a breaking change.

The composite kinds (decolorize, dirty_lens, rain) blend each pixel toward a
level-independent target with an opacity that grows with the level, so the
per-pixel error can only grow. Noise reuses one seeded noise field scaled by
the level's sigma, which gives the same guarantee after clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from gradspace.errors import DomainError, ShapeError
from gradspace.tensor import DTYPE, make_rng

KINDS = ("gaussian_noise", "gaussian_blur", "decolorize", "codec_blockiness", "dirty_lens", "rain")
LEVELS = range(0, 6)

NOISE_SIGMA = (0.0, 0.02, 0.05, 0.1, 0.2, 0.4)
BLUR_SIGMA = (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)
DECOLOR_WEIGHT = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
# doubling steps nest the quantization grids, so error is monotone per coefficient
CODEC_STEP = (0.0, 0.05, 0.1, 0.2, 0.4, 0.8)
DIRT_BLOBS = (0, 2, 4, 6, 8, 10)
DIRT_OPACITY = (0.0, 0.35, 0.5, 0.65, 0.8, 0.95)
RAIN_STREAKS_PER_100PX = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5)
RAIN_OPACITY = (0.0, 0.3, 0.45, 0.6, 0.75, 0.9)
RAIN_HAZE = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

LUMA = np.array([0.299, 0.587, 0.114])
DIRT_COLOR = np.array([0.32, 0.27, 0.2])
RAIN_COLOR = np.array([0.85, 0.87, 0.9])

# challenge codes used by the OOD harness
CHALLENGES = {
    "DE": "decolorize",
    "CE": "codec_blockiness",
    "NO": "gaussian_noise",
    "LB": "gaussian_blur",
    "DL": "dirty_lens",
    "RA": "rain",
}
BLUR_CATEGORY = ("LB", "DL", "RA")


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        if self.level not in LEVELS:
            raise DomainError(f"level must be in 0..5, got {self.level}")

    @property
    def tag(self) -> str:
        return f"{self.kind}-L{self.level}-s{self.seed}"


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=DTYPE)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge-clamped borders."""
    if sigma <= 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = image
    for axis in (0, 1):
        pad = [(0, 0)] * image.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            acc += w * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def _luma(image):
    if image.shape[2] == 3:
        return image @ LUMA
    return image.mean(axis=2)


def _decolorize(image, level):
    gray = _luma(image)[..., None]
    w = DECOLOR_WEIGHT[level]
    return (1 - w) * image + w * gray


def _codec(image, level):
    q = CODEC_STEP[level]
    h, w, c = image.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = padded.shape[:2]
    blocks = padded.reshape(H // 8, 8, W // 8, 8, c)
    coef = dctn(blocks, axes=(1, 3), norm="ortho")
    coef = q * np.round(coef / q)
    rec = idctn(coef, axes=(1, 3), norm="ortho").reshape(H, W, c)
    return rec[:h, :w]


def _composite(image, alpha, target):
    return (1 - alpha[..., None]) * image + alpha[..., None] * target


def _dirty_lens(image, level, seed):
    h, w, c = image.shape
    rng = make_rng(seed)
    n_max = DIRT_BLOBS[-1]
    cy = rng.uniform(0, h, n_max)
    cx = rng.uniform(0, w, n_max)
    rad = rng.uniform(0.12, 0.3, n_max) * min(h, w)
    strength = rng.uniform(0.6, 1.0, n_max)
    yy, xx = np.mgrid[0:h, 0:w]
    clear = np.ones((h, w))
    for i in range(DIRT_BLOBS[level]):
        blob = np.exp(-((yy - cy[i]) ** 2 + (xx - cx[i]) ** 2) / (2 * rad[i] ** 2))
        clear *= 1 - strength[i] * blob
    alpha = DIRT_OPACITY[level] * (1 - clear)
    tint = DIRT_COLOR[:c] if c == 3 else DIRT_COLOR[:c].mean(keepdims=True)
    target = 0.6 * gaussian_blur(image, 2.0) + 0.4 * tint
    return _composite(image, alpha, target)


def _rain(image, level, seed):
    h, w, c = image.shape
    rng = make_rng(seed)
    n_max = int(np.ceil(RAIN_STREAKS_PER_100PX[-1] * h * w / 100))
    y0 = rng.uniform(-0.2 * h, h, n_max)
    x0 = rng.uniform(0, w * 1.2, n_max)
    length = rng.uniform(0.15, 0.4, n_max) * h
    n = int(np.ceil(RAIN_STREAKS_PER_100PX[level] * h * w / 100))
    mask = np.zeros((h, w))
    for i in range(n):
        for t in np.linspace(0, 1, max(2, int(length[i] * 2))):
            # streaks fall down and to the left at a fixed slant
            y = int(round(y0[i] + t * length[i]))
            x = int(round(x0[i] - 0.4 * t * length[i]))
            if 0 <= y < h and 0 <= x < w:
                mask[y, x] = 1.0
    alpha = 1 - (1 - RAIN_OPACITY[level] * mask) * (1 - RAIN_HAZE[level])
    color = RAIN_COLOR[:c] if c == 3 else RAIN_COLOR[:c].mean(keepdims=True)
    target = 0.5 * gaussian_blur(image, 1.5) + 0.5 * color
    return _composite(image, alpha, target)


def apply_distortion(image: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Distort an ``H x W x C`` image in [0, 1]; output is clipped to [0, 1]."""
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {image.shape}")
    if spec.level == 0:
        return image.copy()
    if spec.kind == "gaussian_noise":
        noise = make_rng(spec.seed).standard_normal(image.shape)
        out = image + NOISE_SIGMA[spec.level] * noise
    elif spec.kind == "gaussian_blur":
        out = gaussian_blur(image, BLUR_SIGMA[spec.level])
    elif spec.kind == "decolorize":
        out = _decolorize(image, spec.level)
    elif spec.kind == "codec_blockiness":
        out = _codec(image, spec.level)
    elif spec.kind == "dirty_lens":
        out = _dirty_lens(image, spec.level, spec.seed)
    else:
        out = _rain(image, spec.level, spec.seed)
    return np.clip(out, 0.0, 1.0)
