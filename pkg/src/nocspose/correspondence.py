"""Discretized NOCS maps, patch cropping, correspondence extraction and a
seeded stand-in for the correspondence network.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import files
from .geometry import CameraIntrinsics, NocsBounds, backproject, nocs_unproject

N_BINS = 256
MASK_THRESHOLD = 0.5


class InsufficientCorrespondences(ValueError):
    """Too few foreground pixels to form a solvable correspondence set."""

    def __init__(self, msg="insufficient correspondences"):
        super().__init__(msg)


# ---------------------------------------------------------------------------
# encoding


def discretize(c) -> np.ndarray:
    """Map NOCS values in [0, 1] to bins 0..255, rounding halves up."""
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.floor(c * (N_BINS - 1) + 0.5).astype(np.uint8)


def decode(bins) -> np.ndarray:
    return np.asarray(bins, dtype=np.float64) / (N_BINS - 1)


@dataclass(frozen=True, eq=False)
class NocsMap:
    """Binary foreground mask plus per-pixel argmax NOCS bins."""

    mask: np.ndarray  # (H, W) bool
    bins: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        mask = np.asarray(self.mask, bool)
        bins = np.asarray(self.bins)
        if bins.shape != mask.shape + (3,):
            raise ValueError("bins must be (H, W, 3) matching the mask")
        if bins.dtype != np.uint8:
            if bins.min(initial=0) < 0 or bins.max(initial=0) > N_BINS - 1:
                raise ValueError("bins out of range")
            bins = bins.astype(np.uint8)
        bins = np.where(mask[..., None], bins, 0).astype(np.uint8)
        mask.setflags(write=False)
        bins.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "bins", bins)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def from_render(cls, out) -> "NocsMap":
        return cls(out.mask, discretize(out.nocs))

    @classmethod
    def from_probabilities(cls, mask_probs, nocs_probs) -> "NocsMap":
        """Build a map from network-style outputs.

        ``mask_probs`` is (H, W) foreground probability or (H, W, 2)
        background/foreground scores; ``nocs_probs`` is (H, W, 3, 256).
        """
        mp = np.asarray(mask_probs, dtype=np.float64)
        if mp.ndim == 3:
            mp = mp[..., 1]
        bins = np.argmax(np.asarray(nocs_probs), axis=-1)
        return cls(mp >= MASK_THRESHOLD, bins.astype(np.uint8))

    def decoded(self) -> np.ndarray:
        return decode(self.bins)

    def save(self, nocs_path, mask_path) -> None:
        files.write_rgb8(nocs_path, self.bins)
        files.write_gray8(mask_path, np.where(self.mask, 255, 0))

    @classmethod
    def load(cls, nocs_path, mask_path) -> "NocsMap":
        bins = files.read_png(nocs_path)[..., :3]
        m = files.read_png(mask_path)
        if m.ndim == 3:
            m = m[..., 0]
        return cls(m.astype(np.float64) / 255.0 >= MASK_THRESHOLD, bins)


def map_paths(directory, stem: str) -> tuple[Path, Path]:
    """Conventional on-disk pairing: ``<stem>_nocs.png`` and ``<stem>_mask.png``."""
    d = Path(directory)
    return d / f"{stem}_nocs.png", d / f"{stem}_mask.png"


# ---------------------------------------------------------------------------
# boxes and patches


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError("bounding box must be at least 1x1")

    def intersects(self, width: int, height: int) -> bool:
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0

    def to_json(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    @classmethod
    def from_json(cls, v) -> "BoundingBox":
        return cls(*map(float, v))


def mask_bbox(mask: np.ndarray) -> BoundingBox:
    """Tight box around the foreground of a mask, in pixel-edge coordinates."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if len(rows) == 0:
        raise ValueError("empty mask has no bounding box")
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))


@dataclass(frozen=True)
class PatchTransform:
    """Affine map between patch and full-image continuous pixel coordinates.

    ``full = origin + patch / scale``.
    """

    origin: tuple[float, float]
    scale: float
    size: int

    def to_full(self, uv) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(uv, dtype=np.float64) / self.scale

    def to_patch(self, uv) -> np.ndarray:
        return (np.asarray(uv, dtype=np.float64) - np.asarray(self.origin)) * self.scale

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous patch-to-full matrix."""
        s = 1.0 / self.scale
        return np.array([[s, 0, self.origin[0]], [0, s, self.origin[1]], [0, 0, 1.0]])

    def camera(self, K: CameraIntrinsics) -> CameraIntrinsics:
        """Intrinsics that render directly into the patch."""
        s = self.scale
        return CameraIntrinsics(
            K.fx * s, K.fy * s, (K.cx - self.origin[0]) * s, (K.cy - self.origin[1]) * s, self.size, self.size
        )


def patch_transform(bbox: BoundingBox, out_size: int = 128) -> PatchTransform:
    """Pad the short side of ``bbox`` symmetrically to a square and scale to ``out_size``."""
    side = max(bbox.w, bbox.h)
    x0 = bbox.x - (side - bbox.w) / 2.0
    y0 = bbox.y - (side - bbox.h) / 2.0
    return PatchTransform((float(x0), float(y0)), out_size / side, int(out_size))


def _patch_centers(tf: PatchTransform) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(tf.size) + 0.5
    u, v = np.meshgrid(c, c)
    full = tf.to_full(np.stack([u, v], axis=-1))
    return full[..., 0], full[..., 1]


def _sample_nearest(img: np.ndarray, fx: np.ndarray, fy: np.ndarray, fill=0):
    H, W = img.shape[:2]
    col = np.floor(fx).astype(np.int64)
    row = np.floor(fy).astype(np.int64)
    ok = (col >= 0) & (col < W) & (row >= 0) & (row < H)
    out = np.full(fx.shape + img.shape[2:], fill, dtype=img.dtype)
    out[ok] = img[row[ok], col[ok]]
    return out


def _sample_bilinear(img: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Bilinear over valid (non-zero) samples only, weights renormalised."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    x = fx - 0.5
    y = fy - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    ax = x - x0
    ay = y - y0
    acc = np.zeros(fx.shape)
    wsum = np.zeros(fx.shape)
    for dy, wy in ((0, 1 - ay), (1, ay)):
        for dx, wx in ((0, 1 - ax), (1, ax)):
            r = y0 + dy
            c = x0 + dx
            ok = (c >= 0) & (c < W) & (r >= 0) & (r < H)
            val = np.zeros(fx.shape)
            val[ok] = img[r[ok], c[ok]]
            w = wx * wy * (ok & (val > 0))
            acc += w * val
            wsum += w
    return np.where(wsum > 1e-12, acc / np.maximum(wsum, 1e-12), 0.0)


def extract_patch(image, bbox: BoundingBox, out_size: int = 128, interpolation: str = "nearest"):
    """Crop ``image`` (H, W[, C]) around ``bbox`` into an ``out_size`` square.

    Returns ``(patch, PatchTransform)``. Pixels falling outside the image are 0.
    """
    image = np.asarray(image)
    H, W = image.shape[:2]
    if not bbox.intersects(W, H):
        raise ValueError("bounding box lies outside the image")
    tf = patch_transform(bbox, out_size)
    fx, fy = _patch_centers(tf)
    if interpolation == "nearest":
        return _sample_nearest(image, fx, fy), tf
    if interpolation == "bilinear":
        if image.ndim != 2:
            raise ValueError("bilinear sampling is for single-channel depth")
        return _sample_bilinear(image, fx, fy), tf
    raise ValueError(f"unknown interpolation {interpolation!r}")


def extract_map_patch(nmap: NocsMap, bbox: BoundingBox, out_size: int = 128) -> tuple[NocsMap, PatchTransform]:
    mask, tf = extract_patch(nmap.mask, bbox, out_size)
    bins, _ = extract_patch(nmap.bins, bbox, out_size)
    return NocsMap(mask, bins), tf


def jitter_bbox(bbox: BoundingBox, max_frac: float, seed, image_size: tuple[int, int] | None = None) -> BoundingBox:
    """Shift each side independently by U(-max_frac, max_frac) times its side length.

    ``image_size`` is ``(width, height)``; the result is clipped to it.
    """
    if not 0 <= max_frac < 0.5:
        raise ValueError("max_frac must be in [0, 0.5)")
    if max_frac == 0:
        return bbox
    rng = np.random.default_rng(seed)
    d = rng.uniform(-max_frac, max_frac, size=4)
    x0 = bbox.x + d[0] * bbox.w
    x1 = bbox.x + bbox.w + d[1] * bbox.w
    y0 = bbox.y + d[2] * bbox.h
    y1 = bbox.y + bbox.h + d[3] * bbox.h
    if image_size is not None:
        W, H = image_size
        x0, x1 = np.clip([x0, x1], 0, W)
        y0, y1 = np.clip([y0, y1], 0, H)
    # keep the box valid if clipping collapsed it
    if x1 - x0 < 1:
        x1 = x0 + 1
    if y1 - y0 < 1:
        y1 = y0 + 1
    return BoundingBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0))


# ---------------------------------------------------------------------------
# correspondences


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Matched observations and model points.

    ``observed`` is (N, 2) full-image pixels for 2D-3D sets or (N, 3) camera
    points for 3D-3D sets; ``model`` is (N, 3) model-frame points.
    """

    observed: np.ndarray
    model: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=np.float64)
        mod = np.asarray(self.model, dtype=np.float64).reshape(-1, 3)
        if len(obs) != len(mod):
            raise ValueError("observed/model length mismatch")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "model", mod)

    def __len__(self) -> int:
        return len(self.model)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.observed[idx], self.model[idx])


def _foreground_pixels(nmap: NocsMap, bbox: BoundingBox | None):
    rows, cols = np.nonzero(nmap.mask)
    uv = np.column_stack([cols + 0.5, rows + 0.5])
    if bbox is not None:
        uv = patch_transform(bbox, nmap.shape[0]).to_full(uv)
    return rows, cols, uv


def extract_2d3d(nmap: NocsMap, bounds: NocsBounds, bbox: BoundingBox | None = None) -> CorrespondenceSet:
    """Pixel ↔ model-point pairs; ``bbox`` undoes the patch crop (None = full image)."""
    rows, cols, uv = _foreground_pixels(nmap, bbox)
    if len(rows) < 4:
        raise InsufficientCorrespondences()
    model = nocs_unproject(decode(nmap.bins[rows, cols]), bounds)
    return CorrespondenceSet(uv, model)


def extract_3d3d(
    nmap: NocsMap, depth, K: CameraIntrinsics, bounds: NocsBounds, bbox: BoundingBox | None = None
) -> CorrespondenceSet:
    """Camera-point ↔ model-point pairs from foreground pixels with depth > 0."""
    depth = np.asarray(depth, dtype=np.float64)
    rows, cols, uv = _foreground_pixels(nmap, bbox)
    d = depth[rows, cols]
    ok = np.isfinite(d) & (d > 0)
    if ok.sum() < 3:
        raise InsufficientCorrespondences()
    cam = backproject(K, uv[ok], d[ok])
    model = nocs_unproject(decode(nmap.bins[rows[ok], cols[ok]]), bounds)
    return CorrespondenceSet(cam, model)


# ---------------------------------------------------------------------------
# simulated predictor


@dataclass(frozen=True)
class NoiseConfig:
    bin_sigma: float = 0.0
    dropout_frac: float = 0.0
    occluder_frac: float = 0.0
    outlier_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.bin_sigma < 0:
            raise ValueError("bin_sigma must be non-negative")
        for name in ("dropout_frac", "occluder_frac", "outlier_frac"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")

    def with_seed(self, seed: int) -> "NoiseConfig":
        return replace(self, seed=int(seed))


def simulate_prediction(gt: NocsMap, cfg: NoiseConfig) -> NocsMap:
    """Corrupt a ground-truth map: Gaussian bins, outliers, dropout, occluder (in that order)."""
    rng = np.random.default_rng(cfg.seed)
    mask = gt.mask.copy()
    bins = gt.bins.astype(np.float64)
    rows, cols = np.nonzero(mask)
    n = len(rows)

    if cfg.bin_sigma > 0 and n:
        noise = rng.normal(0.0, cfg.bin_sigma, size=(n, 3))
        bins[rows, cols] = np.clip(np.rint(bins[rows, cols] + noise), 0, N_BINS - 1)

    if cfg.outlier_frac > 0 and n:
        k = int(round(cfg.outlier_frac * n))
        pick = rng.permutation(n)[:k]
        bins[rows[pick], cols[pick]] = rng.integers(0, N_BINS, size=(k, 3))

    if cfg.dropout_frac > 0 and n:
        k = int(round(cfg.dropout_frac * n))
        pick = rng.permutation(n)[:k]
        mask[rows[pick], cols[pick]] = False

    if cfg.occluder_frac > 0 and n:
        # rectangle sized relative to the object's box, placed to overlap it
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        area = cfg.occluder_frac * (r1 - r0) * (c1 - c0)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        h = int(np.clip(round(np.sqrt(area * aspect)), 1, r1 - r0))
        w = int(np.clip(round(area / max(h, 1)), 1, c1 - c0))
        h = int(np.clip(round(area / w), 1, r1 - r0))  # keep the area when w was clipped
        top = int(rng.integers(r0, r1 - h + 1))
        left = int(rng.integers(c0, c1 - w + 1))
        mask[top:top + h, left:left + w] = False

    return NocsMap(mask, bins.astype(np.uint8))
