"""Pose and correspondence scores, mask overlaps, and the network loss terms
computed on maps (for scoring externally produced probability tensors).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .correspondence import N_BINS, NocsMap, decode
from .geometry import CameraIntrinsics, Mesh, NocsBounds, Pose, nocs_unproject
from .raster import render
from .symmetry import NO_SYMMETRY, SymmetrySpec, orbit_poses


def add_metric(est: Pose, gt: Pose, mesh: Mesh) -> float:
    """Mean distance between mesh vertices under the two poses."""
    return float(np.linalg.norm(est.apply(mesh.vertices) - gt.apply(mesh.vertices), axis=1).mean())


@dataclass
class EvalRecord:
    object_id: str
    frame_id: str
    add: float | None = None
    add_sym: float | None = None
    corr_err_median: float | None = None
    dice: float | None = None
    iou: float | None = None
    status: str = "ok"
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EvalRecord":
        return cls(**obj)


def add_recall(records, mesh_or_diameter, threshold_frac: float = 0.1) -> float:
    """Fraction of records whose symmetry-aware ADD is below ``threshold_frac`` diameters.

    Failed records count as misses.
    """
    records = list(records)
    if not records:
        raise ValueError("no records")
    diameter = getattr(mesh_or_diameter, "diameter", mesh_or_diameter)
    thr = threshold_frac * float(diameter)
    hits = 0
    for r in records:
        d = r.add_sym if r.add_sym is not None else r.add
        hits += bool(r.ok and d is not None and d < thr)
    return hits / len(records)


def dice(a, b) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def iou(a, b) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _median_corr_error(pred: NocsMap, gt: NocsMap, bounds: NocsBounds) -> float | None:
    both = pred.mask & gt.mask
    if not both.any():
        return None
    p = nocs_unproject(decode(pred.bins[both]), bounds)
    g = nocs_unproject(decode(gt.bins[both]), bounds)
    return float(np.median(np.linalg.norm(p - g, axis=1)))


def correspondence_error(
    pred: NocsMap,
    gt: NocsMap,
    bounds: NocsBounds,
    gt_pose: Pose | None = None,
    symmetry: SymmetrySpec = NO_SYMMETRY,
    mesh: Mesh | None = None,
    camera: CameraIntrinsics | None = None,
    n_samples: int = 360,
) -> float:
    """Median model-space distance between predicted and true correspondences.

    For symmetric objects the ground truth is re-rendered under every orbit pose
    of ``gt_pose`` (needs ``mesh`` and the patch ``camera``) and the smallest
    median is returned.
    """
    if symmetry.kind == "none":
        err = _median_corr_error(pred, gt, bounds)
        if err is None:
            raise ValueError("no mutual foreground between prediction and ground truth")
        return err
    if gt_pose is None or mesh is None or camera is None:
        raise ValueError("symmetric objects need gt_pose, mesh and camera")
    best = None
    for pose in orbit_poses(gt_pose, symmetry, n_samples):
        candidate = NocsMap.from_render(render(mesh, bounds, pose, camera))
        err = _median_corr_error(pred, candidate, bounds)
        if err is not None and (best is None or err < best):
            best = err
    if best is None:
        raise ValueError("no mutual foreground between prediction and ground truth")
    return best


def nocs_ce_loss(probs, gt: NocsMap) -> float:
    """Foreground cross entropy summed over pixels and the three NOCS channels.

    ``probs`` is (H, W, 3, 256), normalised per pixel and channel.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != gt.shape + (3, N_BINS):
        raise ValueError("probs must be (H, W, 3, 256)")
    if not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError("probabilities are not normalised")
    rows, cols = np.nonzero(gt.mask)
    if len(rows) == 0:
        return 0.0
    p = probs[rows, cols]  # (n, 3, 256)
    target = gt.bins[rows, cols].astype(np.int64)
    picked = np.take_along_axis(p, target[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        return float(-np.log(picked).sum())


def total_loss(probs, mask_pred, gt: NocsMap, alpha: float = 5.0) -> float:
    """``alpha * (1 - dice) + sum_d CE_d``."""
    return alpha * (1.0 - dice(mask_pred, gt.mask)) + nocs_ce_loss(probs, gt)


# ---------------------------------------------------------------------------
# reports

SUMMARY_COLUMNS = [
    "object_id", "n_frames", "n_failed", "add_recall", "mean_add", "median_add",
    "mean_add_sym", "median_add_sym", "mean_corr_err", "mean_dice", "mean_iou",
]


def summarize(records, diameters: dict[str, float], threshold_frac: float = 0.1) -> list[dict]:
    """One summary row per object id, sorted by id."""
    records = list(records)
    if not records:
        raise ValueError("no records")
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.object_id, []).append(r)
    rows = []

    def stat(fn, vals):
        vals = [v for v in vals if v is not None]
        return float(fn(vals)) if vals else None

    for oid in sorted(groups):
        rs = groups[oid]
        ok = [r for r in rs if r.ok]
        rows.append({
            "object_id": oid,
            "n_frames": len(rs),
            "n_failed": len(rs) - len(ok),
            "add_recall": add_recall(rs, diameters[oid], threshold_frac),
            "mean_add": stat(np.mean, [r.add for r in ok]),
            "median_add": stat(np.median, [r.add for r in ok]),
            "mean_add_sym": stat(np.mean, [r.add_sym for r in ok]),
            "median_add_sym": stat(np.median, [r.add_sym for r in ok]),
            # per-image medians averaged over images
            "mean_corr_err": stat(np.mean, [r.corr_err_median for r in ok]),
            "mean_dice": stat(np.mean, [r.dice for r in ok]),
            "mean_iou": stat(np.mean, [r.iou for r in ok]),
        })
    return rows


def write_report(records, diameters: dict[str, float], out_dir, threshold_frac: float = 0.1) -> tuple[Path, Path]:
    """Write ``records.json`` and ``summary.csv``; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    rows = summarize(records, diameters, threshold_frac)
    jpath = out_dir / "records.json"
    jpath.write_text(json.dumps([r.to_json() for r in records], indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else (f"{v:.6g}" if isinstance(v, float) else v)) for k, v in row.items()})
    cpath = out_dir / "summary.csv"
    cpath.write_text(buf.getvalue())
    return jpath, cpath
