"""Meshes, rigid poses, pinhole cameras, NOCS coordinates and the 6D rotation chart.

Points are row vectors throughout: an (N, 3) array of model points ``X`` maps
into the camera frame as ``X @ R.T + t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist


class GeometryError(ValueError):
    """Raised on degenerate or invalid geometric input."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh in model units."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) == 0:
            raise GeometryError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise GeometryError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if not self.diameter > 0:
            raise GeometryError("mesh diameter is zero")

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        if len(v) > 64:
            # the farthest pair always lies on the hull
            try:
                v = v[ConvexHull(v).vertices]
            except QhullError:
                pass  # flat or degenerate point sets: fall back to all vertices
        return float(pdist(v).max()) if len(v) > 1 else 0.0

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.faces]


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform taking model coordinates to camera coordinates."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def inverse(self) -> "Pose":
        return pose_invert(self)

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the model frame, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    def to_json(self) -> dict:
        return {"R": self.rotation.ravel().tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(np.reshape(obj["R"], (3, 3)), obj["t"])


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Return ``a ∘ b`` (apply ``b`` first)."""
    R = a.rotation @ b.rotation
    # re-orthonormalise so long products stay inside the Pose invariants
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return Pose(R, a.rotation @ b.translation + a.translation)


def pose_invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def rotation_angle(Ra, Rb) -> float:
    """Geodesic angle in radians between two rotations."""
    M = np.asarray(Ra).T @ np.asarray(Rb)
    # atan2 form stays accurate near 0 and pi, unlike arccos of the trace
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    return float(np.arctan2(s, c))


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis`` (Rodrigues)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CameraIntrinsics":
        return cls(
            float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
            int(obj["width"]), int(obj["height"]),
        )


def project_points(K: CameraIntrinsics, cam_points) -> np.ndarray:
    """Pinhole projection of camera-frame points (N, 3) to pixels (N, 2).

    No depth check; callers that need one use :func:`project_point`.
    """
    p = np.asarray(cam_points, dtype=np.float64)
    z = p[..., 2]
    return np.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy], axis=-1)


def project_point(K: CameraIntrinsics, pose: Pose, v) -> tuple[np.ndarray, float]:
    """Project model point ``v`` under ``pose``; returns ``(pixel, depth)``."""
    p = pose.apply(v)
    if p[2] <= 0:
        raise GeometryError("point is behind the camera")
    return project_points(K, p), float(p[2])


def backproject(K: CameraIntrinsics, pixel, depth) -> np.ndarray:
    """Lift pixel(s) with known z-depth back into camera coordinates."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise GeometryError("depth must be positive")
    x = (pixel[..., 0] - K.cx) / K.fx * depth
    y = (pixel[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


# ---------------------------------------------------------------------------
# NOCS


@dataclass(frozen=True)
class NocsBounds:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        if any(hi <= lo for lo, hi in zip(self.min, self.max)):
            raise GeometryError("flat model")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.max, dtype=np.float64) - self.lo


def compute_nocs_bounds(mesh: Mesh) -> NocsBounds:
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    if np.any(hi <= lo):
        raise GeometryError("flat model")
    return NocsBounds(tuple(map(float, lo)), tuple(map(float, hi)))


def nocs_project(v, bounds: NocsBounds) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) - bounds.lo) / bounds.extent


def nocs_unproject(c, bounds: NocsBounds) -> np.ndarray:
    return np.asarray(c, dtype=np.float64) * bounds.extent + bounds.lo


# ---------------------------------------------------------------------------
# 6D rotation representation


def rot6d_to_rotation(r) -> np.ndarray:
    """Gram-Schmidt two 3-vectors (first two columns) into a rotation matrix."""
    r = np.asarray(r, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise GeometryError("zero column in 6D rotation")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    if np.linalg.norm(np.cross(b1, a2)) < 1e-12:
        raise GeometryError("parallel columns in 6D rotation")
    b2 = u2 / np.linalg.norm(u2)
    return np.column_stack([b1, b2, np.cross(b1, b2)])


def rotation_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[:, 0], R[:, 1]])


def rot6d_jacobian(r) -> np.ndarray:
    """Derivative of the flattened (row-major) rotation w.r.t. the six inputs, (9, 6)."""
    r = np.asarray(r, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    b2 = u2 / n2
    P1 = (np.eye(3) - np.outer(b1, b1)) / n1
    P2 = (np.eye(3) - np.outer(b2, b2)) / n2
    J = np.empty((9, 6))
    for k in range(6):
        da1 = np.zeros(3)
        da2 = np.zeros(3)
        if k < 3:
            da1[k] = 1.0
        else:
            da2[k - 3] = 1.0
        db1 = P1 @ da1
        du2 = da2 - (db1 @ a2 + b1 @ da2) * b1 - (b1 @ a2) * db1
        db2 = P2 @ du2
        db3 = np.cross(db1, b2) + np.cross(b1, db2)
        J[:, k] = np.column_stack([db1, db2, db3]).ravel()
    return J


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path) -> Mesh:
    """Read an ASCII OBJ or PLY triangle mesh."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise GeometryError(f"unsupported mesh format: {suffix}")


def _load_obj(path: Path) -> Mesh:
    verts, faces = [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if len(idx) != 3:
                raise GeometryError("only triangle faces are supported")
            faces.append(idx)
    return Mesh(np.array(verts), np.array(faces))


def _load_ply(path: Path) -> Mesh:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError("not a PLY file")
    n_vert = n_face = 0
    vprops: list[str] = []
    current = None
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise GeometryError("only ASCII PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vprops.append(parts[-1])
        elif parts[0] == "end_header":
            break
    xyz = [vprops.index(c) for c in ("x", "y", "z")]
    verts = []
    for line in lines[i:i + n_vert]:
        vals = line.split()
        verts.append([float(vals[j]) for j in xyz])
    faces = []
    for line in lines[i + n_vert:i + n_vert + n_face]:
        vals = [int(x) for x in line.split()]
        if vals[0] != 3:
            raise GeometryError("only triangle faces are supported")
        faces.append(vals[1:4])
    return Mesh(np.array(verts), np.array(faces))


def save_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_pose(path) -> Pose:
    return Pose.from_json(json.loads(Path(path).read_text()))


def load_camera(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# procedural meshes used by demos and tests


def box_mesh(size=(1.0, 1.0, 1.0)) -> Mesh:
    sx, sy, sz = (np.asarray(size, dtype=np.float64) / 2.0)
    v = np.array(
        [[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]
    )
    faces = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    return Mesh(v, np.array(faces))


def cylinder_mesh(radius: float = 1.0, height: float = 2.0, segments: int = 64) -> Mesh:
    """Closed cylinder around the model Z axis, centered at the origin."""
    ang = np.arange(segments) * 2 * np.pi / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.vstack([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + j], [i, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return Mesh(v, np.array(faces))


def convex_blob_mesh(seed: int = 0, n_points: int = 60, scale=(1.0, 0.7, 0.45)) -> Mesh:
    """Asymmetric convex mesh: hull of anisotropically scaled random points."""
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n_points, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    p *= rng.uniform(0.8, 1.0, size=(n_points, 1))
    p *= np.asarray(scale)
    hull = ConvexHull(p)
    used = np.unique(hull.simplices)
    remap = -np.ones(len(p), dtype=np.int64)
    remap[used] = np.arange(len(used))
    v = p[used]
    v -= (v.min(axis=0) + v.max(axis=0)) / 2.0
    return Mesh(v, remap[hull.simplices])
