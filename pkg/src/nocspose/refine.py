"""Multi-view render-and-compare pose refinement.

A single object pose is refined against NOCS predictions from several
calibrated views. Every view renders the model at ``Xi_f . T_delta . T_pr . T_s``
(``Xi_f`` the known reference-to-frame transform, ``T_pr`` the starting
hypothesis, ``T_s`` the per-frame symmetry canonicalisation) and compares the
rendered NOCS with the prediction through a robust distance in model space.

The update ``T_delta`` is parameterised by a 6D rotation and a translation in
units of the object diameter. The rotation acts about the hypothesis' origin,
which keeps the two parameter blocks roughly decoupled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correspondence import NocsMap
from .geometry import (
    CameraIntrinsics,
    GeometryError,
    Mesh,
    NocsBounds,
    Pose,
    nocs_unproject,
    rot6d_jacobian,
    rot6d_to_rotation,
)
from .metrics import iou
from .raster import RenderOutput, face_screen_jacobian, render, screen_gradient
from .symmetry import NO_SYMMETRY, SymmetrySpec, disambiguate

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
N_PARAMS = 9


class NoValidReference(RuntimeError):
    def __init__(self, msg: str = "no frame has a usable hypothesis"):
        super().__init__(msg)


# ---------------------------------------------------------------------------
# robust distance


@dataclass(frozen=True)
class RobustParams:
    """Shape ``alpha`` and scale ``c`` (model units) of the robust distance."""

    alpha: float = 1.0
    scale: float = 0.05

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("robust scale must be positive")

    @classmethod
    def for_mesh(cls, mesh: Mesh, alpha: float = 1.0, scale_frac: float = 0.05) -> "RobustParams":
        return cls(alpha, scale_frac * mesh.diameter)


def robust_rho(x, params: RobustParams) -> np.ndarray:
    """General robust function of a non-negative distance ``x``."""
    x = np.asarray(x, dtype=np.float64)
    a, c = float(params.alpha), float(params.scale)
    z = (x / c) ** 2
    if a == 2.0:
        return 0.5 * z
    if a == 0.0:
        return np.log1p(0.5 * z)
    b = abs(a - 2.0)
    return b / a * ((z / b + 1.0) ** (a / 2.0) - 1.0)


def robust_weight(x, params: RobustParams) -> np.ndarray:
    """``rho'(x) / x``, finite at ``x = 0`` (where it equals ``1 / c^2``)."""
    x = np.asarray(x, dtype=np.float64)
    a, c = float(params.alpha), float(params.scale)
    z = (x / c) ** 2
    if a == 2.0:
        return np.full_like(x, 1.0 / c**2)
    if a == 0.0:
        return 1.0 / (c**2 * (0.5 * z + 1.0))
    b = abs(a - 2.0)
    return (z / b + 1.0) ** (a / 2.0 - 1.0) / c**2


def pixel_loss(pred_nocs, rendered_nocs, bounds: NocsBounds, robust: RobustParams) -> np.ndarray:
    """Robust distance between two NOCS values after mapping both back to model space.

    Works on single 3-vectors or on (..., 3) arrays.
    """
    d = nocs_unproject(rendered_nocs, bounds) - nocs_unproject(pred_nocs, bounds)
    return robust_rho(np.linalg.norm(d, axis=-1), robust)


# ---------------------------------------------------------------------------
# inputs


@dataclass(frozen=True, eq=False)
class ViewFrame:
    """One calibrated view: predicted mask and NOCS, intrinsics, world-to-camera rig pose.

    ``nocs`` holds continuous values in [0, 1]; use :meth:`from_map` for
    discretized predictions.
    """

    mask: np.ndarray
    nocs: np.ndarray
    camera: CameraIntrinsics
    rig_pose: Pose
    frame_id: str = ""

    def __post_init__(self):
        mask = np.asarray(self.mask, bool)
        nocs = np.asarray(self.nocs, dtype=np.float64)
        if nocs.shape != mask.shape + (3,):
            raise ValueError("nocs must be (H, W, 3) matching the mask")
        if mask.shape != (self.camera.height, self.camera.width):
            raise ValueError("prediction size does not match its camera")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "nocs", np.where(mask[..., None], nocs, 0.0))

    @classmethod
    def from_map(cls, nmap: NocsMap, camera: CameraIntrinsics, rig_pose: Pose, frame_id: str = "") -> "ViewFrame":
        return cls(nmap.mask, nmap.decoded(), camera, rig_pose, frame_id)

    @classmethod
    def from_render(cls, out: RenderOutput, camera: CameraIntrinsics, rig_pose: Pose, frame_id: str = "") -> "ViewFrame":
        return cls(out.mask, out.nocs, camera, rig_pose, frame_id)


@dataclass(frozen=True, eq=False)
class MultiViewSet:
    frames: tuple
    hypotheses: tuple  # Pose or None per frame, each in its own camera frame
    mesh: Mesh
    bounds: NocsBounds
    symmetry: SymmetrySpec = NO_SYMMETRY

    def __post_init__(self):
        frames = tuple(self.frames)
        hyps = tuple(self.hypotheses)
        if not frames:
            raise ValueError("a multi-view set needs at least one frame")
        if len(frames) != len(hyps):
            raise ValueError("frame count and hypothesis count differ")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "hypotheses", hyps)

    def __len__(self) -> int:
        return len(self.frames)

    def relative(self, ref: int, f: int) -> Pose:
        """``Xi_ref->f``: maps reference-camera coordinates into frame ``f``."""
        return self.frames[f].rig_pose @ self.frames[ref].rig_pose.inverse()


# ---------------------------------------------------------------------------
# parameterisation


def delta_pose(theta, pivot, diameter: float) -> Pose:
    """``T_delta`` for parameters ``theta = [6D rotation, translation / diameter]``.

    The rotation acts about ``pivot`` (a point in reference-camera coordinates).
    """
    theta = np.asarray(theta, dtype=np.float64)
    R = rot6d_to_rotation(theta[:6])
    pivot = np.asarray(pivot, dtype=np.float64)
    return Pose(R, pivot - R @ pivot + diameter * theta[6:])


def identity_params() -> np.ndarray:
    return np.concatenate([IDENTITY_6D, np.zeros(3)])


@dataclass
class _FrameEval:
    loss: float
    pose: Pose  # final render pose including T_s
    T_s: Pose
    render: RenderOutput
    overlap: np.ndarray


def _frame_pose(mvs: MultiViewSet, ref: int, f: int, obj_pose: Pose) -> tuple[Pose, Pose]:
    """Render pose for frame ``f`` of an object pose given in the reference camera."""
    raw = mvs.relative(ref, f) @ obj_pose
    return disambiguate(raw, mvs.symmetry)


def _eval_frame(mvs: MultiViewSet, ref: int, f: int, obj_pose: Pose, robust: RobustParams) -> _FrameEval:
    frame = mvs.frames[f]
    pose, T_s = _frame_pose(mvs, ref, f, obj_pose)
    out = render(mvs.mesh, mvs.bounds, pose, frame.camera)
    overlap = frame.mask & out.mask
    if not overlap.any():
        return _FrameEval(0.0, pose, T_s, out, overlap)
    pred = frame.nocs[overlap]
    loss = float(pixel_loss(pred, out.nocs[overlap], mvs.bounds, robust).sum())
    return _FrameEval(loss, pose, T_s, out, overlap)


def _eval_all(mvs, ref, obj_pose, robust) -> list[_FrameEval]:
    # fixed frame order keeps the floating-point sum deterministic
    return [_eval_frame(mvs, ref, f, obj_pose, robust) for f in range(len(mvs))]


def total_objective(mvs: MultiViewSet, ref: int, T_delta: Pose, T_pr: Pose, robust: RobustParams) -> float:
    """Sum of robust pixel losses over every frame where prediction and render overlap."""
    return float(sum(ev.loss for ev in _eval_all(mvs, ref, T_delta @ T_pr, robust)))


def _evaluate_theta(mvs, ref, theta, T_pr, robust) -> tuple[float, list | None]:
    try:
        T_d = delta_pose(theta, T_pr.translation, mvs.mesh.diameter)
    except GeometryError:
        return np.inf, None
    evs = _eval_all(mvs, ref, T_d @ T_pr, robust)
    return float(sum(ev.loss for ev in evs)), evs


def _objective_theta(mvs, ref, theta, T_pr, robust) -> float:
    return _evaluate_theta(mvs, ref, theta, T_pr, robust)[0]


# ---------------------------------------------------------------------------
# reference selection


def reference_scores(mvs: MultiViewSet, robust: RobustParams) -> list[float | None]:
    """IOU-scaled mean loss for each candidate reference; ``None`` if unusable.

    For a candidate, its hypothesis is carried into every frame; each frame's
    loss is divided by the IOU between the predicted and rendered masks, and
    the result is averaged over frames with non-zero overlap. Candidates
    without a hypothesis or with zero overlap in every frame score ``None``.
    """
    scores: list[float | None] = []
    for r, hyp in enumerate(mvs.hypotheses):
        if hyp is None:
            scores.append(None)
            continue
        vals = []
        for f in range(len(mvs)):
            ev = _eval_frame(mvs, r, f, hyp, robust)
            overlap_iou = iou(mvs.frames[f].mask, ev.render.mask)
            if overlap_iou > 0:
                vals.append(ev.loss / overlap_iou)
        scores.append(float(np.mean(vals)) if vals else None)
    return scores


def select_reference_frame(mvs: MultiViewSet, robust: RobustParams) -> int:
    scores = reference_scores(mvs, robust)
    valid = [(s, i) for i, s in enumerate(scores) if s is not None]
    if not valid:
        raise NoValidReference()
    return min(valid)[1]


# ---------------------------------------------------------------------------
# gradient


def _analytic_frame_grad(mvs, ref, f, ev: _FrameEval, theta, T_pr, robust, screen: str = "face") -> np.ndarray:
    grad = np.zeros(N_PARAMS)
    if not ev.overlap.any():
        return grad
    frame = mvs.frames[f]
    rows, cols = np.nonzero(ev.overlap)
    rend = ev.render.nocs[rows, cols]
    pred = frame.nocs[rows, cols]
    extent = mvs.bounds.extent
    e = (rend - pred) * extent  # model-space discrepancy
    n = np.linalg.norm(e, axis=1)
    dL_dC = (robust_weight(n, robust)[:, None] * e) * extent  # (P, 3)

    if screen == "face":
        G = face_screen_jacobian(mvs.mesh, mvs.bounds, ev.pose, frame.camera, ev.render)
    else:
        G = screen_gradient(ev.render.nocs, ev.render.mask)
    G = G[rows, cols]  # (P, 3, 2)
    dL_duv = np.einsum("pd,pdk->pk", dL_dC, G)  # (P, 2)

    # frozen association: the model point under each pixel moves with the
    # pose, and the rendered NOCS at the fixed pixel shifts the opposite way
    m = nocs_unproject(rend, mvs.bounds)
    X = ev.pose.apply(m)
    K = frame.camera
    z = X[:, 2]
    a = np.column_stack([
        dL_duv[:, 0] * K.fx / z,
        dL_duv[:, 1] * K.fy / z,
        -(dL_duv[:, 0] * K.fx * X[:, 0] + dL_duv[:, 1] * K.fy * X[:, 1]) / z**2,
    ])  # dL/dX per pixel
    Xi = mvs.relative(ref, f)
    bvec = a @ Xi.rotation  # dL/d(reference-frame point)
    w = m @ (T_pr.rotation @ ev.T_s.rotation).T  # reference-frame point before the update rotation
    J6 = rot6d_jacobian(theta[:6]).reshape(3, 3, 6)
    grad[:6] = np.einsum("bj,bjk->k", bvec.T @ w, J6)
    grad[6:] = mvs.mesh.diameter * bvec.sum(axis=0)
    return -grad


def _analytic_grad(mvs, ref, evs, theta, T_pr, robust, screen) -> np.ndarray:
    g = np.zeros(N_PARAMS)
    for f, ev in enumerate(evs):
        g += _analytic_frame_grad(mvs, ref, f, ev, theta, T_pr, robust, screen)
    return g


def gradient(
    mvs: MultiViewSet,
    ref: int,
    theta,
    T_pr: Pose,
    robust: RobustParams,
    mode: str = "analytic",
    fd_step: float = 1e-4,
    screen: str = "face",
) -> np.ndarray:
    """Derivative of the objective with respect to the nine update parameters.

    ``analytic`` freezes the pixel to model-point association and the symmetry
    transforms at the current pose and ignores silhouette motion. Its screen
    derivatives come from the winning faces (``screen="face"``) or from
    central differences of the rendered image (``screen="central"``).
    ``finite-diff`` takes central differences of the full objective.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if mode == "analytic":
        _, evs = _evaluate_theta(mvs, ref, theta, T_pr, robust)
        return _analytic_grad(mvs, ref, evs, theta, T_pr, robust, screen)
    if mode in ("finite-diff", "fd"):
        g = np.zeros(N_PARAMS)
        for k in range(N_PARAMS):
            step = np.zeros(N_PARAMS)
            step[k] = fd_step
            hi = _objective_theta(mvs, ref, theta + step, T_pr, robust)
            lo = _objective_theta(mvs, ref, theta - step, T_pr, robust)
            g[k] = (hi - lo) / (2 * fd_step)
        return g
    raise ValueError(f"unknown gradient mode {mode!r}")


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class RefinerConfig:
    gradient_mode: str = "analytic"
    step_size: float = 1e-2
    max_iters: int = 100
    convergence_tol: float = 1e-6
    fd_step: float = 1e-4
    max_halvings: int = 8
    screen_jacobian: str = "face"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.gradient_mode not in ("analytic", "finite-diff"):
            raise ValueError("gradient_mode must be 'analytic' or 'finite-diff'")
        if self.screen_jacobian not in ("face", "central"):
            raise ValueError("screen_jacobian must be 'face' or 'central'")

    @classmethod
    def from_json(cls, obj: dict) -> "RefinerConfig":
        return cls(**obj)


@dataclass
class RefineResult:
    pose: Pose
    reference: int
    initial_pose: Pose
    objective_history: list = field(default_factory=list)
    reference_scores: list = field(default_factory=list)
    stop_reason: str = ""

    def frame_pose(self, mvs: MultiViewSet, f: int) -> Pose:
        """The refined pose expressed in frame ``f``'s camera."""
        return mvs.relative(self.reference, f) @ self.pose

    def to_json(self) -> dict:
        return {
            "reference": self.reference,
            "reference_scores": self.reference_scores,
            "initial_pose": self.initial_pose.to_json(),
            "final_pose": self.pose.to_json(),
            "objective": self.objective_history,
            "iterations": len(self.objective_history) - 1,
            "stop_reason": self.stop_reason,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def save_rig(frames, path) -> None:
    """Write ``[{"id", "camera", "rig_pose"}, ...]`` for a list of ViewFrames."""
    rows = [{"id": f.frame_id, "camera": f.camera.to_json(), "rig_pose": f.rig_pose.to_json()} for f in frames]
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def load_rig(path) -> list[tuple[str, CameraIntrinsics, Pose]]:
    rows = json.loads(Path(path).read_text())
    return [(str(r["id"]), CameraIntrinsics.from_json(r["camera"]), Pose.from_json(r["rig_pose"])) for r in rows]


def refine_detailed(
    mvs: MultiViewSet,
    cfg: RefinerConfig = RefinerConfig(),
    robust: RobustParams | None = None,
    reference: int | None = None,
) -> RefineResult:
    """Refine the best hypothesis of ``mvs`` against all its views.

    Steps follow the negative gradient with a length of ``step`` in parameter
    space. A step that lowers the objective is accepted and the next trial
    length doubles; otherwise the length is halved, at most ``max_halvings``
    times in a row. The objective therefore never increases.
    """
    if robust is None:
        robust = RobustParams.for_mesh(mvs.mesh)
    scores = reference_scores(mvs, robust)
    if reference is None:
        valid = [(s, i) for i, s in enumerate(scores) if s is not None]
        if not valid:
            raise NoValidReference()
        reference = min(valid)[1]
    T_pr = mvs.hypotheses[reference]
    if T_pr is None:
        raise NoValidReference(f"frame {reference} has no hypothesis")

    theta = identity_params()
    current, evs = _evaluate_theta(mvs, reference, theta, T_pr, robust)
    history = [current]
    step = cfg.step_size
    reason = "max_iters"
    for _ in range(cfg.max_iters):
        if cfg.gradient_mode == "analytic":
            g = _analytic_grad(mvs, reference, evs, theta, T_pr, robust, cfg.screen_jacobian)
        else:
            g = gradient(mvs, reference, theta, T_pr, robust, cfg.gradient_mode, cfg.fd_step)
        gn = np.linalg.norm(g)
        if not np.isfinite(gn) or gn == 0.0:
            reason = "zero_gradient"
            break
        direction = -g / gn
        accepted = False
        for _h in range(cfg.max_halvings + 1):
            trial = theta + step * direction
            value, trial_evs = _evaluate_theta(mvs, reference, trial, T_pr, robust)
            if value < current:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            reason = "line_search"
            break
        decrease = current - value
        # re-orthonormalise the 6D block so its scale stays well conditioned
        R = rot6d_to_rotation(trial[:6])
        theta = np.concatenate([R[:, 0], R[:, 1], trial[6:]])
        current, evs = value, trial_evs
        history.append(current)
        step *= 2.0
        if decrease < cfg.convergence_tol:
            reason = "converged"
            break

    T_d = delta_pose(theta, T_pr.translation, mvs.mesh.diameter)
    return RefineResult(T_d @ T_pr, reference, T_pr, history, scores, reason)


def refine(mvs: MultiViewSet, cfg: RefinerConfig = RefinerConfig(), robust: RobustParams | None = None) -> Pose:
    """Refined object pose in the selected reference frame's camera."""
    return refine_detailed(mvs, cfg, robust).pose


# ---------------------------------------------------------------------------
# view sampling


def viewing_direction(rig_pose: Pose) -> np.ndarray:
    """Optical axis of a world-to-camera pose, in world coordinates."""
    return rig_pose.rotation.T @ np.array([0.0, 0.0, 1.0])


def sample_views(rig_poses, n: int, strategy: str = "closest", seed=0, start: int = 0) -> list[int]:
    """Choose ``n`` views starting from ``start``.

    ``closest`` repeatedly adds the view with the smallest angle to any chosen
    view, ``furthest`` the one whose smallest angle to the chosen views is
    largest. ``random`` draws the rest uniformly with ``seed``. Ties go to the
    lower index.
    """
    rig_poses = list(rig_poses)
    m = len(rig_poses)
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > m:
        raise ValueError(f"asked for {n} views but only {m} are available")
    if strategy not in ("closest", "random", "furthest"):
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        others = [i for i in range(m) if i != start]
        picked = rng.choice(len(others), size=n - 1, replace=False) if n > 1 else []
        return [start] + [others[i] for i in picked]
    dirs = np.stack([viewing_direction(p) for p in rig_poses])
    ang = np.arccos(np.clip(dirs @ dirs.T, -1.0, 1.0))
    chosen = [start]
    nearest = ang[start].copy()
    nearest[start] = np.nan
    while len(chosen) < n:
        free = np.array([i for i in range(m) if i not in chosen])
        d = nearest[free]
        pick = free[np.argmin(d)] if strategy == "closest" else free[np.argmax(d)]
        chosen.append(int(pick))
        nearest = np.fmin(nearest, ang[pick])
        nearest[chosen] = np.nan
    return chosen
