"""Procedural RGB test images: smooth colour fields with rectangles, discs and texture."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def synthetic_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(40, 215, size=3)
    grad = rng.normal(0, 40, size=(2, 3))
    img = base + (yy[..., None] / height - 0.5) * grad[0] + (xx[..., None] / width - 0.5) * grad[1]
    for _ in range(int(rng.integers(2, 6))):
        colour = rng.uniform(0, 255, size=3)
        if rng.random() < 0.5:
            h0, w0 = rng.integers(0, height), rng.integers(0, width)
            h1 = min(height, h0 + int(rng.integers(height // 8, height // 2 + 1)))
            w1 = min(width, w0 + int(rng.integers(width // 8, width // 2 + 1)))
            img[h0:h1, w0:w1] = 0.3 * img[h0:h1, w0:w1] + 0.7 * colour
        else:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            r = rng.uniform(min(height, width) / 10, min(height, width) / 3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            img[mask] = 0.3 * img[mask] + 0.7 * colour
    texture = gaussian_filter(rng.normal(0, 1, size=(height, width, 3)), (1.5, 1.5, 0))
    img = gaussian_filter(img, (0.7, 0.7, 0)) + texture * rng.uniform(5, 25)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthetic_images(count: int, height: int, width: int | None = None, seed: int = 0) -> list[np.ndarray]:
    """``count`` reproducible (H, W, 3) uint8 images."""
    rng = np.random.default_rng(seed)
    width = height if width is None else width
    return [synthetic_image(rng, height, width) for _ in range(count)]
