"""Synthetic scene generation, the estimation and refinement pipelines, and
report writing. The command-line interface is a thin layer over this module.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import files
from .correspondence import (
    BoundingBox,
    InsufficientCorrespondences,
    NocsMap,
    NoiseConfig,
    extract_2d3d,
    extract_3d3d,
    extract_map_patch,
    extract_patch,
    jitter_bbox,
    map_paths,
    mask_bbox,
    patch_transform,
    simulate_prediction,
)
from .depth import (
    DepthMap,
    PerlinConfig,
    add_gaussian_foreground,
    add_perlin_background,
    add_random_holes,
    fill_holes,
)
from .geometry import (
    CameraIntrinsics,
    GeometryError,
    Mesh,
    Pose,
    axis_angle,
    backproject,
    box_mesh,
    compute_nocs_bounds,
    convex_blob_mesh,
    cylinder_mesh,
    load_mesh,
    random_rotation,
    save_obj,
)
from .metrics import EvalRecord, add_metric, correspondence_error, dice, iou, summarize, write_report
from .raster import render, render_depth_16bit
from .refine import MultiViewSet, NoValidReference, RefinerConfig, RobustParams, ViewFrame, refine_detailed, sample_views
from .solvers import (
    DegenerateConfiguration,
    NoConsensus,
    RansacConfig,
    estimate_normals,
    icp_point_to_plane,
    kabsch_ransac,
    pnp_ransac,
)
from .symmetry import NO_SYMMETRY, SymmetrySpec, disambiguate, symmetry_min_add

MODES = ("rgb", "rgbd", "rgb+d-kabsch")
SAMPLING = ("closest", "random", "furthest")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Missing or unreadable input data (CLI exit code 3)."""


def sub_seed(seed: int, *keys: int) -> int:
    """Independent, reproducible child seed for a (seed, keys...) tuple."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class FrameEntry:
    frame_id: str
    gt_pose: Pose
    rig_pose: Pose
    bbox: BoundingBox
    nocs: str
    mask: str
    depth: str | None = None

    def to_json(self) -> dict:
        return {
            "id": self.frame_id,
            "gt_pose": self.gt_pose.to_json(),
            "rig_pose": self.rig_pose.to_json(),
            "bbox": self.bbox.to_json(),
            "nocs": self.nocs,
            "mask": self.mask,
            "depth": self.depth,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FrameEntry":
        return cls(
            str(obj["id"]),
            Pose.from_json(obj["gt_pose"]),
            Pose.from_json(obj["rig_pose"]),
            BoundingBox.from_json(obj["bbox"]),
            obj["nocs"],
            obj["mask"],
            obj.get("depth"),
        )


@dataclass
class SceneManifest:
    """A synthetic or recorded scene: one object seen by calibrated frames.

    Paths are relative to ``root`` (the manifest's directory).
    """

    object_id: str
    mesh_path: str
    camera: CameraIntrinsics
    frames: list
    symmetry_path: str | None = None
    depth_scale: float = 1.0
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise DataError("frame ids are not unique")

    def to_json(self) -> dict:
        return {
            "object_id": self.object_id,
            "mesh": self.mesh_path,
            "symmetry": self.symmetry_path,
            "camera": self.camera.to_json(),
            "depth_scale": self.depth_scale,
            "frames": [f.to_json() for f in self.frames],
        }

    def save(self, path) -> None:
        files.dump_json(self.to_json(), path)

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DataError(f"manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}") from exc
        try:
            m = cls(
                str(obj.get("object_id", "object")),
                obj["mesh"],
                CameraIntrinsics.from_json(obj["camera"]),
                [FrameEntry.from_json(f) for f in obj["frames"]],
                obj.get("symmetry"),
                float(obj.get("depth_scale", 1.0)),
                path.parent,
            )
        except (AttributeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        m.check_files()
        return m

    def path(self, rel: str) -> Path:
        return self.root / rel

    def check_files(self) -> None:
        refs = [self.mesh_path] + ([self.symmetry_path] if self.symmetry_path else [])
        for f in self.frames:
            refs += [f.nocs, f.mask] + ([f.depth] if f.depth else [])
        missing = [r for r in refs if not self.path(r).exists()]
        if missing:
            raise DataError(f"manifest references missing files: {missing[:3]}")

    def load_mesh(self) -> Mesh:
        try:
            return load_mesh(self.path(self.mesh_path))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load mesh: {exc}") from exc

    def load_symmetry(self) -> SymmetrySpec:
        if not self.symmetry_path:
            return NO_SYMMETRY
        return SymmetrySpec.from_json(json.loads(self.path(self.symmetry_path).read_text()))

    def frame(self, frame_id: str) -> FrameEntry:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise DataError(f"no frame with id {frame_id!r}")

    def load_map(self, f: FrameEntry) -> NocsMap:
        return NocsMap.load(self.path(f.nocs), self.path(f.mask))

    def load_depth(self, f: FrameEntry) -> np.ndarray | None:
        return files.load_depth(self.path(f.depth)) if f.depth else None


# ---------------------------------------------------------------------------
# configuration


def _build(cls, obj: dict | None, section: str):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ConfigError(f"[{section}] must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic scene settings; ``mesh`` is a path or ``{"kind": ..., ...}``."""

    mesh: object = field(default_factory=lambda: {"kind": "blob", "seed": 0})
    symmetry: dict | None = None
    object_id: str = "object"
    n_frames: int = 20
    camera: dict = field(default_factory=lambda: {"fx": 150.0, "fy": 150.0, "cx": 64.0, "cy": 64.0, "width": 128, "height": 128})
    distance_range: tuple = (2.0, 6.0)
    max_offset_frac: float = 0.15
    depth_aug: dict | None = None

    def __post_init__(self):
        if self.n_frames < 0:
            raise ValueError("n_frames must be non-negative")
        lo, hi = self.distance_range
        if not 0 < lo <= hi:
            raise ValueError("distance_range must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class RansacSettings:
    max_iters: int = 300
    confidence: float = 0.995
    min_inlier_count: int = 12
    pnp_threshold_px: float = 2.0
    kabsch_threshold_frac: float = 0.05

    def pnp(self, seed: int) -> RansacConfig:
        return RansacConfig(self.max_iters, self.pnp_threshold_px, self.min_inlier_count, self.confidence, seed)

    def kabsch(self, diameter: float, seed: int) -> RansacConfig:
        return RansacConfig(
            self.max_iters, self.kabsch_threshold_frac * diameter, self.min_inlier_count, self.confidence, seed
        )


@dataclass(frozen=True)
class RefineInit:
    """Where refinement starts: the per-frame estimates, or GT perturbed by a fixed amount."""

    source: str = "estimate"
    rot_deg: float = 10.0
    trans_frac: float = 0.1

    def __post_init__(self):
        if self.source not in ("estimate", "perturbed-gt"):
            raise ValueError("source must be 'estimate' or 'perturbed-gt'")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    mode: str = "rgb"
    noise: NoiseConfig = NoiseConfig()
    rgbd_noise: NoiseConfig | None = None
    ransac: RansacSettings = RansacSettings()
    bbox: str = "gt"
    jitter_frac: float = 0.1
    patch_size: int = 128
    icp: bool = False
    fill_depth_holes: bool = True
    refiner: RefinerConfig = RefinerConfig()
    robust_alpha: float = 1.0
    robust_scale_frac: float = 0.05
    views: int = 4
    sampling: str = "closest"
    refine_init: RefineInit = RefineInit()
    threshold_frac: float = 0.1
    orbit_samples: int = 36
    predictions: str | None = None
    synth: SynthConfig = SynthConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.views < 1:
            raise ConfigError("views must be at least 1")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}")
        if self.bbox not in ("gt", "jitter"):
            raise ConfigError("bbox must be 'gt' or 'jitter'")
        if not 0 <= self.jitter_frac < 0.5:
            raise ConfigError("jitter_frac must be in [0, 0.5)")
        if self.patch_size < 8:
            raise ConfigError("patch_size must be at least 8")

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)
        nested = {
            "noise": NoiseConfig,
            "rgbd_noise": NoiseConfig,
            "ransac": RansacSettings,
            "refiner": RefinerConfig,
            "refine_init": RefineInit,
            "synth": SynthConfig,
        }
        for key, typ in nested.items():
            if key in obj and not (key == "rgbd_noise" and obj[key] is None):
                obj[key] = _build(typ, obj[key], key)
        if "synth" in obj and isinstance(obj["synth"].distance_range, list):
            obj["synth"] = replace(obj["synth"], distance_range=tuple(obj["synth"].distance_range))
        return _build(cls, obj, "config")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def to_json(self) -> dict:
        return asdict(self)

    def robust(self, mesh: Mesh) -> RobustParams:
        return RobustParams.for_mesh(mesh, self.robust_alpha, self.robust_scale_frac)


# ---------------------------------------------------------------------------
# synthesis


def make_mesh(spec) -> tuple[Mesh, SymmetrySpec]:
    """Procedural mesh from ``{"kind": "blob" | "box" | "cylinder", ...}`` or a file path."""
    if isinstance(spec, str):
        return load_mesh(spec), NO_SYMMETRY
    spec = dict(spec)
    kind = spec.pop("kind", "blob")
    try:
        if kind == "blob":
            return convex_blob_mesh(**spec), NO_SYMMETRY
        if kind == "box":
            size = spec.get("size", (1.0, 1.0, 1.0))
            return box_mesh(size), NO_SYMMETRY
        if kind == "cylinder":
            return cylinder_mesh(**spec), SymmetrySpec.continuous()
    except TypeError as exc:
        raise ConfigError(f"bad mesh parameters: {exc}") from exc
    raise ConfigError(f"unknown mesh kind {kind!r}")


def look_at_rotation(direction, roll: float) -> np.ndarray:
    """World-to-camera rotation whose optical axis points along ``direction``."""
    z = np.asarray(direction, dtype=np.float64)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows: camera axes in world coordinates
    return axis_angle([0.0, 0.0, 1.0], roll) @ R


def sample_view(rng: np.random.Generator, diameter: float, distance_range, max_offset_frac: float, K: CameraIntrinsics) -> Pose:
    """World-to-camera pose on the view sphere around the world origin."""
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    dist = rng.uniform(*distance_range) * diameter
    roll = rng.uniform(0.0, 2 * np.pi)
    R = look_at_rotation(-d, roll)  # camera sits at dist*d looking at the origin
    t = -R @ (dist * d)
    # shift the object off the optical axis by up to max_offset_frac of the image
    off = rng.uniform(-max_offset_frac, max_offset_frac, size=2) * np.array([K.width, K.height])
    t = t + np.array([off[0] * dist / K.fx, off[1] * dist / K.fy, 0.0])
    return Pose(R, t)


def _augment_depth(depth: np.ndarray, mask: np.ndarray, aug: dict, seed: int, diameter: float) -> np.ndarray:
    far = float(aug.get("background_frac", 8.0)) * diameter
    d = DepthMap(np.where(mask, depth, far), np.zeros(mask.shape, bool))
    amp = float(aug.get("perlin_amplitude_frac", 0.0)) * diameter
    if amp > 0:
        d = add_perlin_background(d, mask, PerlinConfig(amplitude=amp, seed=sub_seed(seed, 1)))
    sigma = float(aug.get("gaussian_sigma_frac", 0.0)) * diameter
    if sigma > 0:
        d = add_gaussian_foreground(d, mask, sigma, sub_seed(seed, 2))
    if aug.get("holes", False):
        d = add_random_holes(d, sub_seed(seed, 3))
    return d.values


def cmd_synth(cfg: PipelineConfig, out_dir) -> SceneManifest:
    """Render a seeded synthetic scene and write it with its manifest."""
    sc = cfg.synth
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    mesh, sym = make_mesh(sc.mesh)
    if sc.symmetry is not None:
        sym = SymmetrySpec.from_json(sc.symmetry)
    bounds = compute_nocs_bounds(mesh)
    try:
        K = CameraIntrinsics.from_json(sc.camera)
    except (KeyError, GeometryError) as exc:
        raise ConfigError(f"bad camera: {exc}") from exc
    D = mesh.diameter
    save_obj(mesh, out / "mesh.obj")
    sym_rel = None
    if sym.kind != "none":
        files.dump_json(sym.to_json(), out / "symmetry.json")
        sym_rel = "symmetry.json"
    depth_scale = (sc.distance_range[1] + 1.0) * D / 60000.0

    rng = np.random.default_rng(sub_seed(cfg.seed, 0))
    world_obj = Pose(random_rotation(rng))
    frames = []
    for i in range(sc.n_frames):
        for _attempt in range(100):
            rig = sample_view(rng, D, sc.distance_range, sc.max_offset_frac, K)
            gt = rig @ world_obj
            canon, _ = disambiguate(gt, sym)
            ren = render(mesh, bounds, canon, K)
            if ren.mask.sum() >= 16:
                break
        else:
            raise DataError("could not place the object in view")
        fid = f"{i:06d}"
        nocs_p, mask_p = map_paths(out / "frames", fid)
        NocsMap.from_render(ren).save(nocs_p, mask_p)
        depth_p = out / "frames" / f"{fid}_depth.png"
        depth = ren.depth
        if sc.depth_aug:
            depth = _augment_depth(depth, ren.mask, sc.depth_aug, sub_seed(cfg.seed, 1, i), D)
        counts = np.rint(np.where(depth > 0, depth, 0.0) / depth_scale)
        if counts.max(initial=0) > np.iinfo(np.uint16).max:
            raise DataError("depth exceeds the 16-bit range")
        files.save_depth(depth_p, counts.astype(np.uint16), depth_scale)
        frames.append(
            FrameEntry(
                fid, gt, rig, mask_bbox(ren.mask),
                str(nocs_p.relative_to(out)), str(mask_p.relative_to(out)), str(depth_p.relative_to(out)),
            )
        )
    manifest = SceneManifest(sc.object_id, "mesh.obj", K, frames, sym_rel, depth_scale, out)
    manifest.save(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# estimation


@dataclass
class Scene:
    """A manifest with its mesh and derived quantities loaded once."""

    manifest: SceneManifest
    mesh: Mesh
    symmetry: SymmetrySpec

    @classmethod
    def open(cls, manifest: SceneManifest) -> "Scene":
        return cls(manifest, manifest.load_mesh(), manifest.load_symmetry())

    @property
    def bounds(self):
        return compute_nocs_bounds(self.mesh)


@dataclass
class FrameEstimate:
    record: EvalRecord
    pose: Pose | None
    prediction: NocsMap | None
    patch_camera: CameraIntrinsics | None
    seconds: float = 0.0


def frame_bbox(cfg: PipelineConfig, scene: Scene, idx: int) -> BoundingBox:
    f = scene.manifest.frames[idx]
    if cfg.bbox == "gt":
        return f.bbox
    K = scene.manifest.camera
    return jitter_bbox(f.bbox, cfg.jitter_frac, sub_seed(cfg.seed, 2, idx), (K.width, K.height))


def predict_patch(cfg: PipelineConfig, scene: Scene, idx: int, bbox: BoundingBox) -> tuple[NocsMap, NocsMap, CameraIntrinsics]:
    """(prediction, ground truth) NOCS maps for the patch cut by ``bbox``, plus the patch camera.

    Predictions are loaded from ``cfg.predictions`` when set, otherwise
    simulated by corrupting the ground truth rendered straight into the patch.
    """
    f = scene.manifest.frames[idx]
    tf = patch_transform(bbox, cfg.patch_size)
    Kp = tf.camera(scene.manifest.camera)
    canon, _ = disambiguate(f.gt_pose, scene.symmetry)
    gt = NocsMap.from_render(render(scene.mesh, scene.bounds, canon, Kp))
    if cfg.predictions:
        nocs_p, mask_p = map_paths(cfg.predictions, f.frame_id)
        try:
            full = NocsMap.load(nocs_p, mask_p)
        except OSError as exc:
            raise DataError(f"cannot load prediction for frame {f.frame_id}: {exc}") from exc
        pred, _ = extract_map_patch(full, bbox, cfg.patch_size)
        return pred, gt, Kp
    noise = cfg.rgbd_noise if (cfg.mode == "rgbd" and cfg.rgbd_noise is not None) else cfg.noise
    pred = simulate_prediction(gt, noise.with_seed(sub_seed(cfg.seed, 3, idx, noise.seed)))
    return pred, gt, Kp


def _patch_depth(cfg: PipelineConfig, scene: Scene, idx: int, bbox: BoundingBox) -> np.ndarray:
    depth = scene.manifest.load_depth(scene.manifest.frames[idx])
    if depth is None:
        raise DataError("depth modes need depth images")
    if cfg.fill_depth_holes and (depth <= 0).any() and (depth > 0).any():
        depth = fill_holes(DepthMap.from_array(depth)).values
    patch, _ = extract_patch(depth, bbox, cfg.patch_size, interpolation="bilinear")
    return patch


def _icp_polish(scene: Scene, pose: Pose, pred: NocsMap, depth_patch, Kp: CameraIntrinsics) -> Pose:
    """Point-to-plane ICP of the rendered visible surface onto observed depth."""
    ren = render(scene.mesh, scene.bounds, pose, Kp)
    obs = pred.mask & (depth_patch > 0)
    if ren.mask.sum() < 10 or obs.sum() < 10:
        return pose
    rows, cols = np.nonzero(ren.mask)
    cam = backproject(Kp, np.column_stack([cols + 0.5, rows + 0.5]), ren.depth[rows, cols])
    model = pose.inverse().apply(cam)
    rows, cols = np.nonzero(obs)
    scene_pts = backproject(Kp, np.column_stack([cols + 0.5, rows + 0.5]), depth_patch[rows, cols])
    normals = estimate_normals(scene_pts, k=min(10, len(scene_pts)))
    try:
        return icp_point_to_plane(model, scene_pts, normals, pose, corr_dist=0.1 * scene.mesh.diameter)
    except ValueError:
        return pose


FAILURES = (InsufficientCorrespondences, NoConsensus, DegenerateConfiguration, GeometryError, np.linalg.LinAlgError)


def estimate_frame(cfg: PipelineConfig, scene: Scene, idx: int) -> FrameEstimate:
    """Run bbox -> patch -> prediction -> correspondences -> solver for one frame."""
    t0 = time.perf_counter()
    f = scene.manifest.frames[idx]
    rec = EvalRecord(scene.manifest.object_id, f.frame_id)
    K = scene.manifest.camera
    bounds = scene.bounds
    try:
        bbox = frame_bbox(cfg, scene, idx)
        pred, gt_map, Kp = predict_patch(cfg, scene, idx, bbox)
    except (ValueError, GeometryError) as exc:
        rec.status = f"failed: {exc}"
        return FrameEstimate(rec, None, None, None, time.perf_counter() - t0)
    rec.dice = dice(pred.mask, gt_map.mask)
    rec.iou = iou(pred.mask, gt_map.mask)
    rec.diagnostics["bbox"] = bbox.to_json()
    try:
        rec.corr_err_median = correspondence_error(
            pred, gt_map, bounds, disambiguate(f.gt_pose, scene.symmetry)[0], scene.symmetry, scene.mesh, Kp,
            cfg.orbit_samples,
        )
    except ValueError:
        rec.corr_err_median = None
    seed = sub_seed(cfg.seed, 4, idx)
    try:
        if cfg.mode == "rgb":
            pairs = extract_2d3d(pred, bounds, bbox)
            res = pnp_ransac(pairs, K, cfg.ransac.pnp(seed))
            pose = res.pose
        else:
            depth_patch = _patch_depth(cfg, scene, idx, bbox)
            pairs = extract_3d3d(pred, depth_patch, K, bounds, bbox)
            res = kabsch_ransac(pairs, cfg.ransac.kabsch(scene.mesh.diameter, seed))
            pose = res.pose
            if cfg.icp:
                pose = _icp_polish(scene, pose, pred, depth_patch, Kp)
    except FAILURES as exc:
        rec.status = f"failed: {exc}"
        return FrameEstimate(rec, None, pred, Kp, time.perf_counter() - t0)
    rec.add = add_metric(pose, f.gt_pose, scene.mesh)
    rec.add_sym = symmetry_min_add(pose, f.gt_pose, scene.mesh, scene.symmetry) if scene.symmetry.kind != "none" else rec.add
    rec.diagnostics.update(res.to_json())
    rec.diagnostics["pose"] = pose.to_json()
    return FrameEstimate(rec, pose, pred, Kp, time.perf_counter() - t0)


def cmd_estimate(manifest: SceneManifest, cfg: PipelineConfig) -> list[FrameEstimate]:
    """Per-frame pose estimates in frame-id order; solver failures become failed records."""
    scene = Scene.open(manifest)
    order = sorted(range(len(manifest.frames)), key=lambda i: manifest.frames[i].frame_id)
    return [estimate_frame(cfg, scene, i) for i in order]


# ---------------------------------------------------------------------------
# refinement


def _perturb(pose: Pose, rot_deg: float, trans: float, seed: int) -> Pose:
    rng = np.random.default_rng(seed)
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return Pose(axis_angle(ax, np.deg2rad(rot_deg)) @ pose.rotation, pose.translation + trans * d)


def group_frames(rig_poses, n: int, strategy: str, seed: int) -> list[list[int]]:
    """Split frames into non-overlapping groups of up to ``n``.

    Each group starts at the lowest remaining index and is completed with
    ``sample_views`` over the remaining frames.
    """
    remaining = list(range(len(rig_poses)))
    groups = []
    while remaining:
        k = min(n, len(remaining))
        local = sample_views([rig_poses[i] for i in remaining], k, strategy, sub_seed(seed, 5, len(groups)))
        group = [remaining[j] for j in local]
        groups.append(group)
        remaining = [i for i in remaining if i not in group]
    return groups


@dataclass
class RefineOutcome:
    before: list
    after: list
    reports: list


def cmd_refine(manifest: SceneManifest, cfg: PipelineConfig) -> RefineOutcome:
    """Estimate every frame, refine each view group, and score before and after."""
    scene = Scene.open(manifest)
    frames = manifest.frames
    order = sorted(range(len(frames)), key=lambda i: frames[i].frame_id)
    estimates = {i: estimate_frame(cfg, scene, i) for i in order}
    robust = cfg.robust(scene.mesh)
    D = scene.mesh.diameter

    hyps = {}
    before = {}
    for i in order:
        est = estimates[i]
        rec = est.record
        if cfg.refine_init.source == "perturbed-gt":
            pose = _perturb(frames[i].gt_pose, cfg.refine_init.rot_deg, cfg.refine_init.trans_frac * D, sub_seed(cfg.seed, 6, i))
            rec = replace(rec, status="ok", add=add_metric(pose, frames[i].gt_pose, scene.mesh), diagnostics={"init": "perturbed-gt"})
            rec.add_sym = (symmetry_min_add(pose, frames[i].gt_pose, scene.mesh, scene.symmetry)
                           if scene.symmetry.kind != "none" else rec.add)
        else:
            pose = est.pose
        hyps[i] = pose
        before[i] = rec

    rigs = [frames[i].rig_pose for i in order]
    groups = [[order[j] for j in g] for g in group_frames(rigs, cfg.views, cfg.sampling, cfg.seed)]
    after = {}
    reports = []
    for gi, group in enumerate(groups):
        ids = [frames[i].frame_id for i in group]
        usable = [i for i in group if estimates[i].prediction is not None]
        try:
            if not usable:
                raise NoValidReference("no prediction in this group")
            vf = [ViewFrame.from_map(estimates[i].prediction, estimates[i].patch_camera, frames[i].rig_pose, frames[i].frame_id) for i in usable]
            mvs = MultiViewSet(vf, [hyps[i] for i in usable], scene.mesh, scene.bounds, scene.symmetry)
            result = refine_detailed(mvs, cfg.refiner, robust)
        except (NoValidReference, GeometryError, ValueError) as exc:
            for i in group:
                after[i] = EvalRecord(manifest.object_id, frames[i].frame_id, status=f"failed: {exc}",
                                      diagnostics={"group": ids})
            reports.append({"group": ids, "status": f"failed: {exc}"})
            continue
        report = result.to_json()
        report["group"] = ids
        report["reference"] = frames[usable[result.reference]].frame_id
        reports.append(report)
        for k, i in enumerate(group):
            if i not in usable:
                after[i] = EvalRecord(manifest.object_id, frames[i].frame_id, status="failed: no prediction",
                                      diagnostics={"group": ids})
                continue
            pose = result.frame_pose(mvs, usable.index(i))
            gt = frames[i].gt_pose
            rec = EvalRecord(manifest.object_id, frames[i].frame_id)
            rec.add = add_metric(pose, gt, scene.mesh)
            rec.add_sym = symmetry_min_add(pose, gt, scene.mesh, scene.symmetry) if scene.symmetry.kind != "none" else rec.add
            rec.dice, rec.iou, rec.corr_err_median = before[i].dice, before[i].iou, before[i].corr_err_median
            rec.diagnostics = {
                "group": ids,
                "reference": report["reference"],
                "add_before": before[i].add,
                "add_sym_before": before[i].add_sym,
                "pose": pose.to_json(),
            }
            after[i] = rec
    return RefineOutcome([before[i] for i in order], [after[i] for i in order], reports)


# ---------------------------------------------------------------------------
# evaluation and rendering


def load_records(path) -> list[EvalRecord]:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"records not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"records are not valid JSON: {exc}") from exc
    try:
        return [EvalRecord.from_json(r) for r in obj]
    except TypeError as exc:
        raise DataError(f"malformed records: {exc}") from exc


def cmd_eval(records, manifest: SceneManifest, out_dir, cfg: PipelineConfig = PipelineConfig()):
    records = list(records)
    if not records:
        raise DataError("no records to evaluate")
    diam = {manifest.object_id: manifest.load_mesh().diameter}
    for r in records:
        if r.object_id not in diam:
            raise DataError(f"record for unknown object {r.object_id!r}")
    return write_report(records, diam, out_dir, cfg.threshold_frac)


def cmd_render(manifest: SceneManifest, frame_id: str, out_dir, pose: Pose | None = None) -> list[Path]:
    """Write NOCS, mask and 16-bit depth PNGs for a frame at its GT or a given pose."""
    scene = Scene.open(manifest)
    f = manifest.frame(frame_id)
    pose = f.gt_pose if pose is None else pose
    canon, _ = disambiguate(pose, scene.symmetry)
    out = render(scene.mesh, scene.bounds, canon, manifest.camera)
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    nocs_p, mask_p = map_paths(d, frame_id)
    NocsMap.from_render(out).save(nocs_p, mask_p)
    depth_p = d / f"{frame_id}_depth.png"
    files.save_depth(depth_p, render_depth_16bit(out, manifest.depth_scale), manifest.depth_scale)
    return [nocs_p, mask_p, depth_p]


def write_records(records, path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=2, sort_keys=True) + "\n")


def report_estimates(estimates, manifest: SceneManifest, out_dir, cfg: PipelineConfig) -> None:
    """Records, summary and a separate timing file (kept apart so reports stay byte-stable)."""
    out = Path(out_dir)
    records = [e.record for e in estimates]
    write_report(records, {manifest.object_id: manifest.load_mesh().diameter}, out, cfg.threshold_frac)
    files.dump_json({e.record.frame_id: e.seconds for e in estimates}, out / "timing.json")


def summary_rows(records, manifest: SceneManifest, cfg: PipelineConfig) -> list[dict]:
    return summarize(records, {manifest.object_id: manifest.load_mesh().diameter}, cfg.threshold_frac)
