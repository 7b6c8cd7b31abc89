"""Lossless image I/O (PNG and binary PPM) via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ImageIOError

FORMATS = {".png": "PNG", ".ppm": "PPM", ".pnm": "PPM"}


def read_image(path) -> np.ndarray:
    """Load ``path`` as an (H, W, 3) uint8 array; grey and alpha inputs are converted to RGB."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                raise ImageIOError(f"{path}: unsupported pixel mode {im.mode} (8-bit RGB expected)")
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc


def write_image(image: np.ndarray, path) -> None:
    from PIL import Image

    fmt = FORMATS.get(Path(path).suffix.lower())
    if fmt is None:
        raise ImageIOError(f"{path}: only lossless .png and .ppm outputs are supported")
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ImageIOError(f"expected an (H, W, 3) uint8 image, got {image.dtype} {image.shape}")
    try:
        Image.fromarray(image, "RGB").save(path, format=fmt)
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ImageIOError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FORMATS)
