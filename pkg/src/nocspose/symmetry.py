"""Canonical pose selection for rotationally symmetric objects.

Symmetric objects render the same image from many poses, but their NOCS maps
differ. Every pose is mapped to a canonical representative so that the camera
sits in a fixed region of the model frame: the +Y half of the YZ plane for
continuous symmetry, or the group element closest to +Y for discrete
symmetry. The symmetry axis is internally rotated onto model Z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Mesh, Pose, axis_angle

KINDS = ("none", "continuous", "discrete")


def _align_to_z(axis: np.ndarray) -> np.ndarray:
    """Rotation A with ``A @ axis == e_z``."""
    z = np.array([0.0, 0.0, 1.0])
    c = float(axis @ z)
    if c > 1 - 1e-15:
        return np.eye(3)
    if c < -1 + 1e-15:
        return axis_angle([1.0, 0.0, 0.0], np.pi)
    return axis_angle(np.cross(axis, z), np.arccos(np.clip(c, -1, 1)))


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class SymmetrySpec:
    kind: str = "none"
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    transforms: tuple = ()

    def __post_init__(self):
        kind = {"continuous-axis": "continuous"}.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError("symmetry axis must be non-zero")
        axis = axis / n
        transforms = tuple(np.asarray(g, dtype=np.float64).reshape(3, 3) for g in self.transforms)
        if kind == "discrete":
            if not transforms:
                raise ValueError("discrete symmetry needs its group transforms")
            if not any(np.allclose(g, np.eye(3), atol=1e-9) for g in transforms):
                raise ValueError("discrete group must contain the identity")
            # identity first so ties resolve to it
            transforms = tuple(sorted(transforms, key=lambda g: not np.allclose(g, np.eye(3), atol=1e-9)))
            for a in transforms:
                for b in transforms:
                    ab = a @ b
                    if not any(np.allclose(ab, g, atol=1e-9) for g in transforms):
                        raise ValueError("discrete symmetry transforms are not closed under composition")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "transforms", transforms)

    @property
    def align(self) -> np.ndarray:
        return _align_to_z(self.axis)

    def rotation_about_axis(self, angle: float) -> np.ndarray:
        A = self.align
        return A.T @ _rot_z(angle) @ A

    @classmethod
    def continuous(cls, axis=(0, 0, 1)) -> "SymmetrySpec":
        return cls("continuous", np.asarray(axis, dtype=np.float64))

    @classmethod
    def discrete_about_axis(cls, angles_deg, axis=(0, 0, 1)) -> "SymmetrySpec":
        tmp = cls("continuous", np.asarray(axis, dtype=np.float64))
        angles = sorted({float(a) % 360.0 for a in angles_deg} | {0.0})
        gs = [tmp.rotation_about_axis(np.deg2rad(a)) for a in angles]
        return cls("discrete", tmp.axis, tuple(gs))

    def to_json(self) -> dict:
        out = {"kind": self.kind, "axis": self.axis.tolist()}
        if self.kind == "discrete":
            out["discrete_angles_deg"] = [self._angle_deg(g) for g in self.transforms]
        return out

    def _angle_deg(self, g: np.ndarray) -> float:
        gz = self.align @ g @ self.align.T
        return float(np.rad2deg(np.arctan2(gz[1, 0], gz[0, 0])) % 360.0)

    @classmethod
    def from_json(cls, obj: dict) -> "SymmetrySpec":
        kind = obj.get("kind", "none")
        axis = obj.get("axis", [0.0, 0.0, 1.0])
        if kind == "discrete":
            return cls.discrete_about_axis(obj.get("discrete_angles_deg", [0.0]), axis)
        return cls(kind, np.asarray(axis, dtype=np.float64))


def load_symmetry(path) -> SymmetrySpec:
    return SymmetrySpec.from_json(json.loads(Path(path).read_text()))


NO_SYMMETRY = SymmetrySpec()


def disambiguate_continuous(pose: Pose, spec: SymmetrySpec) -> tuple[Pose, Pose]:
    """Rotate about the axis so the camera lies in the model's +Y half of the YZ plane.

    Returns ``(adjusted, T_s)`` with ``adjusted == pose ∘ T_s``.
    """
    A = spec.align
    c = A @ pose.camera_center()
    if np.hypot(c[0], c[1]) < 1e-9:
        return pose, Pose.identity()
    theta = np.pi / 2 - np.arctan2(c[1], c[0])
    G = A.T @ _rot_z(theta) @ A  # G @ camera_center is on the canonical +Y side
    T_s = Pose(G.T)
    return Pose(pose.rotation @ G.T, pose.translation), T_s


def disambiguate_discrete(pose: Pose, spec: SymmetrySpec) -> tuple[Pose, Pose]:
    """Pick the group element that brings the camera closest to the +Y base region."""
    c = pose.camera_center()
    n = np.linalg.norm(c)
    if n == 0:
        return pose, Pose.identity()
    ref = spec.align.T @ np.array([0.0, 1.0, 0.0])
    cosines = [float((g @ c) @ ref) / n for g in spec.transforms]
    g = spec.transforms[int(np.argmax(cosines))]
    return Pose(pose.rotation @ g.T, pose.translation), Pose(g.T)


def disambiguate(pose: Pose, spec: SymmetrySpec) -> tuple[Pose, Pose]:
    if spec.kind == "continuous":
        return disambiguate_continuous(pose, spec)
    if spec.kind == "discrete":
        return disambiguate_discrete(pose, spec)
    return pose, Pose.identity()


def orbit_rotations(spec: SymmetrySpec, n_samples: int = 360) -> list[np.ndarray]:
    if spec.kind == "discrete":
        return list(spec.transforms)
    if spec.kind == "continuous":
        return [spec.rotation_about_axis(2 * np.pi * k / n_samples) for k in range(n_samples)]
    return [np.eye(3)]


def orbit_poses(pose: Pose, spec: SymmetrySpec, n_samples: int = 360) -> list[Pose]:
    """Poses that render identically to ``pose`` for a perfectly symmetric object."""
    return [Pose(pose.rotation @ g, pose.translation) for g in orbit_rotations(spec, n_samples)]


def symmetry_min_add(est: Pose, gt: Pose, mesh: Mesh, spec: SymmetrySpec, n_samples: int = 360) -> float:
    """Smallest ADD between ``est`` and any pose on the symmetry orbit of ``gt``."""
    V = mesh.vertices
    pe = est.apply(V)
    G = np.stack(orbit_rotations(spec, n_samples))
    # gt ∘ g applied to V: (R g) v + t
    rv = np.einsum("ij,gjk,nk->gni", gt.rotation, G, V) + gt.translation
    return float(np.linalg.norm(rv - pe[None], axis=2).mean(axis=1).min())
