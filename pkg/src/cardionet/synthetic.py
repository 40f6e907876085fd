"""Built-in synthetic dataset: bright disc (positive) vs. uniform noise (negative).

Positives and negatives share the same dim uniform-noise background, so the
disc is the only class evidence and a trained map has something to localize.

The real ChestX-ray8 corpus cannot ship with the package, so this generator
is the desk-scale stand-in used for end-to-end training checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetSplit, ImageRecord, NEGATIVE, POSITIVE


@dataclass(frozen=True)
class Disc:
    cy: float
    cx: float
    radius: float

    def bbox(self, size):
        """Inclusive pixel bounding box ``(top, left, bottom, right)`` clipped to the image."""
        top = max(0, int(np.floor(self.cy - self.radius)))
        left = max(0, int(np.floor(self.cx - self.radius)))
        bottom = min(size - 1, int(np.ceil(self.cy + self.radius)))
        right = min(size - 1, int(np.ceil(self.cx + self.radius)))
        return top, left, bottom, right


def disc_image(rng, size):
    """A bright disc near the image center on a dim, lightly noisy background."""
    r = rng.uniform(0.14, 0.22) * size
    jitter = 0.12 * size
    cy = size / 2 + rng.uniform(-jitter, jitter)
    cx = size / 2 + rng.uniform(-jitter, jitter)
    yy, xx = np.mgrid[0:size, 0:size]
    inside = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    img = rng.uniform(0.0, 0.3, (size, size))
    img[inside] = rng.uniform(0.8, 1.0, inside.sum())
    return img.astype(np.float32), Disc(cy - 0.5, cx - 0.5, r)


def noise_image(rng, size):
    """Background-only noise, drawn exactly like the disc images' background."""
    return rng.uniform(0.0, 0.3, (size, size)).astype(np.float32)


def make_synthetic(n_images=40, size=64, seed=0, ratio=0.8):
    """Generate a balanced disc/noise set and split it.

    Returns ``(split, tensors, discs)``: ``tensors`` maps image_id to a
    ``(1, 1, size, size)`` array and ``discs`` maps positive ids to their
    :class:`Disc`. With the defaults the training side has 32 images.
    """
    from .dataset import split as stratified_split

    rng = np.random.default_rng(seed)
    records, tensors, discs = [], {}, {}
    for k in range(n_images):
        image_id = f"synthetic_{k:04d}.png"
        if k % 2 == 0:
            img, disc = disc_image(rng, size)
            discs[image_id] = disc
            cls = POSITIVE
        else:
            img = noise_image(rng, size)
            cls = NEGATIVE
        tensors[image_id] = img[None, None]
        records.append(ImageRecord(image_id, frozenset(), image_id, cls))
    return stratified_split(records, ratio, seed), tensors, discs


def argmax_in_disc(prob_map, disc: Disc):
    """True if the map's argmax pixel lies inside the disc's bounding box."""
    m = np.asarray(prob_map).reshape(prob_map.shape[-2:])
    y, x = np.unravel_index(int(np.argmax(m)), m.shape)
    top, left, bottom, right = disc.bbox(m.shape[0])
    return top <= y <= bottom and left <= x <= right


__all__ = ["Disc", "DatasetSplit", "make_synthetic", "argmax_in_disc", "disc_image", "noise_image"]
