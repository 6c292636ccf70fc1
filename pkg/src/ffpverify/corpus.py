"""Procedural training corpora for the patch classifier.

``depth_corpus`` builds RGB-D samples whose colour statistics are identical
across classes while the depth channel carries the class geometry: roofs
rise toward the top of the patch, façades rise toward the bottom and the
background is rough terrain. A colour-only model therefore sits at chance
while a depth-aware model can separate the classes.
"""

from __future__ import annotations

import numpy as np

from .network import BACKGROUND, FACADE, ROOF
from .patches import normalize_depth
from .textures import STYLES, texture, value_noise


def _coords(size, rng):
    scale = rng.uniform(0.05, 0.25)
    ou, ov = rng.uniform(0, 50, size=2)
    g = (np.arange(size) + 0.5) * scale
    return np.meshgrid(g + ou, g + ov)


def _color(size, rng):
    u, v = _coords(size, rng)
    style = STYLES[rng.integers(len(STYLES))]
    rgb = texture(style, u, v, key=int(rng.integers(1 << 20)))
    return np.moveaxis(rgb, -1, 0) / 255.0


def _depth(cls, size, rng):
    r = (np.arange(size) + 0.5) / size
    col, row = np.meshgrid(r, r)
    if cls == BACKGROUND:
        key = int(rng.integers(1 << 20))
        return value_noise(col * 8, row * 8, key, 1.0) + 0.5 * value_noise(col * 8, row * 8, key + 7, 0.3)
    angle = rng.uniform(-np.pi / 4, np.pi / 4)
    # the ramp points up the patch for roofs and down it for façades
    d = np.sin(angle) * col + np.cos(angle) * row
    ramp = -d if cls == ROOF else d
    return ramp + rng.normal(0.0, 0.03, size=ramp.shape)


def depth_corpus(n_per_class: int, size: int = 32, seed: int = 0):
    """Return ``(X, y)`` with ``X`` float32 ``(3 n, 4, size, size)``."""
    rng = np.random.default_rng(seed)
    X = np.empty((3 * n_per_class, 4, size, size), dtype=np.float32)
    y = np.repeat(np.array([ROOF, FACADE, BACKGROUND]), n_per_class)
    for i, cls in enumerate(y):
        X[i, :3] = _color(size, rng)
        X[i, 3] = normalize_depth(_depth(cls, size, rng), np.ones((size, size), bool))
    perm = rng.permutation(len(y))
    return X[perm], y[perm]


def colored_noise_corpus(n_per_class: int, size: int = 32, seed: int = 0):
    """Tiny set where each class has its own mean colour plus noise."""
    rng = np.random.default_rng(seed)
    means = np.array([[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.8]])
    y = np.repeat(np.arange(3), n_per_class)
    X = rng.normal(0.0, 0.15, size=(len(y), 4, size, size))
    X[:, :3] += means[y][:, :, None, None]
    X[:, 3] = rng.uniform(0, 1, size=(len(y), size, size))
    return X.astype(np.float32), y
