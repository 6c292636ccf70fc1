"""Procedural surface textures for synthetic imagery.

Every texture maps surface coordinates ``(u, v)`` in meters to RGB values in
``[0, 255]``. They are pure functions of position and an integer ``key``, so
a surface looks the same from every viewpoint.
"""

from __future__ import annotations

import numpy as np

STYLES = ("tiles", "windows", "noise")


def _hash(ix, iy, key):
    """Deterministic per-cell pseudo-random numbers in [0, 1)."""
    h = (np.asarray(ix, dtype=np.int64) * 73856093) ^ (np.asarray(iy, dtype=np.int64) * 19349663) ^ (int(key) * 83492791)
    h = (h ^ (h >> 13)) * 1274126177
    h = h ^ (h >> 16)
    return (h & 0xFFFF).astype(np.float64) / 65536.0


def value_noise(u, v, key=0, scale=1.0):
    """Bilinearly interpolated lattice noise in [0, 1)."""
    x, y = np.asarray(u) / scale, np.asarray(v) / scale
    ix, iy = np.floor(x), np.floor(y)
    fx, fy = x - ix, y - iy
    fx, fy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    n00 = _hash(ix, iy, key)
    n10 = _hash(ix + 1, iy, key)
    n01 = _hash(ix, iy + 1, key)
    n11 = _hash(ix + 1, iy + 1, key)
    return (n00 * (1 - fx) + n10 * fx) * (1 - fy) + (n01 * (1 - fx) + n11 * fx) * fy


def tiles(u, v, key=0):
    """Roof tiles: staggered rows with dark grooves and per-tile tint."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    row = np.floor(v / 0.4)
    col = np.floor(u / 0.3 + 0.5 * (row % 2))
    fu = (u / 0.3 + 0.5 * (row % 2)) - col
    fv = v / 0.4 - row
    groove = (fu < 0.12) | (fv < 0.15)
    tint = 0.8 + 0.4 * _hash(col, row, key)
    base = np.array([172.0, 74.0, 52.0])
    rgb = base * tint[..., None]
    rgb[groove] *= 0.55
    return np.clip(rgb, 0, 255)


def windows(u, v, key=0):
    """Façade: plastered wall with a regular grid of dark windows."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    fu = np.mod(u, 3.0)
    fv = np.mod(v, 3.0)
    glass = (fu > 0.9) & (fu < 2.1) & (fv > 0.8) & (fv < 2.3)
    frame = (fu > 0.8) & (fu < 2.2) & (fv > 0.7) & (fv < 2.4) & ~glass
    wall = np.array([206.0, 196.0, 174.0]) * (0.92 + 0.16 * value_noise(u, v, key, 2.0))[..., None]
    rgb = wall.copy()
    rgb[frame] = (235.0, 235.0, 235.0)
    rgb[glass] = np.array([42.0, 54.0, 78.0]) * (0.8 + 0.4 * _hash(np.floor(u / 3), np.floor(v / 3), key))[glass][..., None]
    return np.clip(rgb, 0, 255)


def noise(u, v, key=0):
    """Ground and rubble: multi-octave grey-brown noise."""
    n = 0.5 * value_noise(u, v, key, 4.0) + 0.3 * value_noise(u, v, key + 1, 1.0) + 0.2 * value_noise(u, v, key + 2, 0.25)
    base = np.array([118.0, 112.0, 96.0])
    return np.clip(base * (0.55 + 0.9 * n)[..., None], 0, 255)


TEXTURES = {"tiles": tiles, "windows": windows, "noise": noise}


def texture(style, u, v, key=0):
    return TEXTURES[style](u, v, key)
