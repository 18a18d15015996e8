"""Procedural test images for desk-scale experiments and fixtures."""

from __future__ import annotations

import numpy as np

from gradspace.tensor import child_seed, make_rng


def natural_image(seed: int, size: int = 32, channels: int = 3) -> np.ndarray:
    """Smooth color field with edges and oriented texture, values in [0.05, 0.95]."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, channels))
    for _ in range(4):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.15, 0.5)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += blob[..., None] * rng.uniform(-1, 1, channels)
    for _ in range(2):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 6)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 6))
        img += 0.25 * wave[..., None] * rng.uniform(0.2, 1, channels)
    for _ in range(2):
        y0, x0 = rng.integers(0, size - 4, 2)
        y1, x1 = y0 + rng.integers(4, size // 2), x0 + rng.integers(4, size // 2)
        img[y0:y1, x0:x1] += rng.uniform(-0.6, 0.6, channels)
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return 0.05 + 0.9 * img


def sign_image(seed: int, size: int = 16, channels: int = 3) -> np.ndarray:
    """Traffic-sign-like picture: a bordered shape with a glyph on a soft background."""
    rng = make_rng(seed)
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    bg_a, bg_b = rng.uniform(0.2, 0.8, (2, channels))
    t = rng.uniform(0, 1)
    img = bg_a + (bg_b - bg_a) * (t * yy + (1 - t) * xx)[..., None]
    cy, cx = rng.uniform(0.4, 0.6, 2)
    r = rng.uniform(0.3, 0.42)
    shape = rng.integers(0, 3)
    dy, dx = yy - cy, xx - cx
    if shape == 0:
        dist = np.sqrt(dy ** 2 + dx ** 2) / r
    elif shape == 1:
        dist = np.maximum(np.abs(dy), np.abs(dx)) / r
    else:
        dist = np.maximum(np.abs(dx) * 1.7 + dy * 0.9, -dy * 1.2) / r
    palette = np.array([[0.85, 0.1, 0.1], [0.1, 0.25, 0.8], [0.95, 0.8, 0.1], [0.95, 0.95, 0.95]])
    border, fill = palette[rng.choice(4, 2, replace=False)]
    if channels == 1:
        border, fill = border.mean(keepdims=True), fill.mean(keepdims=True)
    img = np.where((dist < 1.0)[..., None], border, img)
    img = np.where((dist < 0.75)[..., None], fill, img)
    # glyph: a bar or a cross in dark ink
    ink = np.full(channels, 0.08)
    bar = (np.abs(dy) < 0.06) & (np.abs(dx) < 0.45 * r)
    if rng.integers(0, 2):
        bar |= (np.abs(dx) < 0.06) & (np.abs(dy) < 0.45 * r)
    img = np.where(bar[..., None], ink, img)
    img = img + 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def image_set(kind: str, count: int, seed: int, size: int, channels: int = 3) -> list[np.ndarray]:
    make = natural_image if kind == "natural" else sign_image
    return [make(child_seed(seed, i), size, channels) for i in range(count)]
