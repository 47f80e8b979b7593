"""Image ingestion: synthetic face-like images or a directory of files."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from ..seeding import substream
from ..transforms import blur_linear

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synthetic_face(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    """A smooth portrait-like test image in [0, 1]: background, hair, face, features."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((size, size, 3))
    top, bottom = rng.uniform(0.3, 0.8, 3), rng.uniform(0.3, 0.8, 3)
    img[:] = top + (bottom - top) * yy[..., None]

    cx, cy = rng.uniform(0.45, 0.55), rng.uniform(0.5, 0.58)
    ry, rx = rng.uniform(0.28, 0.34), rng.uniform(0.2, 0.26)
    hair = rng.uniform(0.1, 0.55) * np.array([1.0, rng.uniform(0.7, 0.9), rng.uniform(0.5, 0.8)])
    img[_ellipse(yy, xx, cy - 0.08, cx, ry + 0.06, rx + 0.05)] = hair
    skin = np.array([0.85, 0.68, 0.56]) * rng.uniform(0.75, 1.05)
    img[_ellipse(yy, xx, cy + 0.03, cx, ry, rx)] = np.clip(skin, 0.0, 0.95)
    eye = np.array([0.25, 0.2, 0.18]) * rng.uniform(0.6, 1.4)
    for side in (-1, 1):
        img[_ellipse(yy, xx, cy - 0.02, cx + side * 0.09, 0.025, 0.045)] = eye
    lips = np.array([0.72, 0.38, 0.4]) * rng.uniform(0.85, 1.1)
    img[_ellipse(yy, xx, cy + 0.18, cx, 0.03, 0.08)] = np.clip(lips, 0.0, 0.95)

    img = img + 0.01 * rng.standard_normal(img.shape)
    img = blur_linear(img, 1.0 * size / 128)
    return np.clip(img, 0.03, 0.97)


def synthetic_faces(seed: int, n: int, size: int = 128) -> np.ndarray:
    return np.stack([synthetic_face(substream(seed, "synthetic-image", i), size) for i in range(n)])


def center_crop_resize(im: Image.Image, size: int) -> np.ndarray:
    w, h = im.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    im = im.convert("RGB").crop((left, top, left + s, top + s))
    if s != size:
        im = im.resize((size, size), Image.BICUBIC)
    return np.asarray(im, dtype=np.float64) / 255.0


def load_image(path: "str | Path", size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if size is None:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return center_crop_resize(im, size)


def load_directory(directory: "str | Path", size: int, limit: int | None = None) -> tuple[np.ndarray, list[str]]:
    """Load images sorted by filename, center-cropped and resized to ``size``."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, ids = [], []
    for p in paths:
        if limit is not None and len(images) >= limit:
            break
        try:
            images.append(load_image(p, size))
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        ids.append(p.stem)
    if not images:
        raise ValueError(f"no readable images in {directory}")
    return np.stack(images), ids
