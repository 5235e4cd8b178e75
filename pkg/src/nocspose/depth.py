"""Depth-map preparation: hole filling, local-mean parameterization and
seeded augmentations (Perlin background, Gaussian foreground, random holes).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    holes: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        h = np.asarray(self.holes, bool)
        if v.shape != h.shape:
            raise ValueError("values and hole mask must have the same shape")
        if np.any(~np.isfinite(v[~h])) or np.any(v[~h] < 0):
            raise ValueError("valid depth values must be finite and non-negative")
        v = np.where(h, 0.0, v)
        v.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "holes", h)

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        """Treat zeros and non-finite values as holes."""
        v = np.asarray(values, dtype=np.float64)
        holes = ~np.isfinite(v) | (v <= 0)
        return cls(np.where(holes, 0.0, v), holes)


def fill_holes(d: DepthMap) -> DepthMap:
    """Give every hole the value of its nearest valid pixel.

    Distance is Euclidean in pixel units; ties go to the valid pixel that comes
    first in row-major order.
    """
    if d.holes.all():
        raise ValueError("depth map has no valid pixels")
    if not d.holes.any():
        return d
    H, W = d.values.shape
    valid = np.flatnonzero(~d.holes.ravel())  # row-major ascending
    holes = np.flatnonzero(d.holes.ravel())
    vxy = np.column_stack(np.divmod(valid, W)).astype(np.float64)
    hxy = np.column_stack(np.divmod(holes, W)).astype(np.float64)
    tree = cKDTree(vxy)
    k = min(16, len(valid))
    dist, idx = tree.query(hxy, k=k)
    dist = dist.reshape(len(holes), k)
    idx = idx.reshape(len(holes), k)
    tie = dist <= dist[:, :1] + 1e-9
    j = np.where(tie, idx, len(valid)).min(axis=1)
    if k < len(valid):
        # more equidistant candidates than queried: fall back to an exact scan
        for i in np.flatnonzero(tie.all(axis=1)):
            j[i] = min(tree.query_ball_point(hxy[i], dist[i, 0] + 1e-9))
    out = d.values.ravel().copy()
    out[holes] = out[valid[j]]
    return DepthMap(out.reshape(H, W), np.zeros((H, W), bool))


def depth_parameterize(d, radius: int = 5) -> np.ndarray:
    """Subtract the local mean over a (2r+1)^2 window clipped to the image."""
    values = d.values if isinstance(d, DepthMap) else np.asarray(d, dtype=np.float64)
    if isinstance(d, DepthMap) and d.holes.any():
        raise ValueError("fill holes before parameterizing")
    H, W = values.shape
    r = int(radius)
    # centering first makes a constant map come out exactly zero
    values = values - values.flat[0]
    # integral images of values and of in-bounds counts
    S = np.zeros((H + 1, W + 1))
    S[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    rows = np.arange(H)
    cols = np.arange(W)
    r0 = np.clip(rows - r, 0, H)
    r1 = np.clip(rows + r + 1, 0, H)
    c0 = np.clip(cols - r, 0, W)
    c1 = np.clip(cols + r + 1, 0, W)
    total = S[r1][:, c1] - S[r0][:, c1] - S[r1][:, c0] + S[r0][:, c0]
    count = np.outer(r1 - r0, c1 - c0)
    return values - total / count


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class PerlinConfig:
    cell_size: int = 16
    octaves: int = 4
    amplitude: float = 1.0
    persistence: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValueError("cell_size must be at least 2")
        if self.octaves < 1:
            raise ValueError("octaves must be at least 1")


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin_octave(shape, cell_size: float, rng: np.random.Generator) -> np.ndarray:
    """One octave of 2D lattice-gradient noise in [-1, 1], sampled at pixel centers.

    Unit gradients on an integer lattice with spacing ``cell_size`` pixels and
    quintic interpolation; the value is exactly zero at lattice points.
    """
    H, W = shape
    gy = int(np.ceil(H / cell_size)) + 2
    gx = int(np.ceil(W / cell_size)) + 2
    ang = rng.uniform(0, 2 * np.pi, size=(gy, gx))
    grads = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    y = (np.arange(H) + 0.5) / cell_size
    x = (np.arange(W) + 0.5) / cell_size
    return perlin_at(grads, *np.meshgrid(x, y))


def perlin_at(grads: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate gradient noise with lattice gradients ``grads[iy, ix]`` at (x, y)."""
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    def corner(dy, dx):
        g = grads[y0 + dy, x0 + dx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u = _fade(fx)
    v = _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bot = corner(1, 0) * (1 - u) + corner(1, 1) * u
    # |n| <= sqrt(2)/2 for unit gradients; scale to use the [-1, 1] range
    return np.sqrt(2.0) * (top * (1 - v) + bot * v)


def perlin_noise(shape, cfg: PerlinConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    out = np.zeros(shape)
    amp = cfg.amplitude
    cell = float(cfg.cell_size)
    for _ in range(cfg.octaves):
        out += amp * perlin_octave(shape, cell, rng)
        amp *= cfg.persistence
        cell = max(cell / 2.0, 1.0)
    return out


def add_perlin_background(d: DepthMap, fg_mask, cfg: PerlinConfig) -> DepthMap:
    """Add summed-octave Perlin noise to background pixels only."""
    fg = np.asarray(fg_mask, bool)
    if cfg.amplitude == 0 or fg.all():
        return d
    noise = perlin_noise(d.values.shape, cfg)
    values = np.where(fg, d.values, np.maximum(d.values + noise, 0.0))
    return DepthMap(values, d.holes & fg)


def add_gaussian_foreground(d: DepthMap, fg_mask, sigma: float, seed) -> DepthMap:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    fg = np.asarray(fg_mask, bool)
    if sigma == 0:
        return d
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=d.values.shape)
    values = np.where(fg & ~d.holes, np.maximum(d.values + noise, 0.0), d.values)
    return DepthMap(values, d.holes)


def add_random_holes(d: DepthMap, seed, max_count: int = 5, min_side: int = 2, max_side: int = 16) -> DepthMap:
    """Punch 0..max_count rectangular holes with sides in [min_side, max_side]."""
    rng = np.random.default_rng(seed)
    H, W = d.values.shape
    holes = d.holes.copy()
    for _ in range(int(rng.integers(0, max_count + 1))):
        h = int(rng.integers(min_side, max_side + 1))
        w = int(rng.integers(min_side, max_side + 1))
        top = int(rng.integers(0, max(H - h, 0) + 1))
        left = int(rng.integers(0, max(W - w, 0) + 1))
        holes[top:top + h, left:left + w] = True
    return DepthMap(np.where(holes, 0.0, d.values), holes)
