"""Hard z-buffered software rasterizer producing mask, NOCS and depth images.

Pixel ``(row i, col j)`` has its center at ``(x, y) = (j + 0.5, i + 0.5)``.
Coverage uses edge functions with a top-left style tie rule, so triangles that
share an edge never double-cover or leave a gap. Attributes are interpolated
perspective-correctly. Back faces are not culled; triangles with any vertex at
``z <= 1e-6`` are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, GeometryError, Mesh, NocsBounds, Pose, nocs_project

Z_NEAR = 1e-6


@dataclass(frozen=True, eq=False)
class RenderOutput:
    mask: np.ndarray   # (H, W) bool
    nocs: np.ndarray   # (H, W, 3) float, zero where mask is False
    depth: np.ndarray  # (H, W) float, zero where mask is False
    face: np.ndarray   # (H, W) int, winning face index or -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def _edge_inclusive(ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    return (dy > 0) | ((dy == 0) & (dx < 0))


def render(
    mesh: Mesh,
    bounds: NocsBounds,
    pose: Pose,
    K: CameraIntrinsics,
    width: int | None = None,
    height: int | None = None,
) -> RenderOutput:
    W = K.width if width is None else int(width)
    H = K.height if height is None else int(height)
    if W < 1 or H < 1:
        raise GeometryError("zero-area frame")

    cam = pose.apply(mesh.vertices)
    faces = mesh.faces
    z = cam[:, 2]
    front = np.all(z[faces] > Z_NEAR, axis=1)
    face_ids = np.nonzero(front)[0]

    empty = RenderOutput(
        np.zeros((H, W), bool), np.zeros((H, W, 3)), np.zeros((H, W)), -np.ones((H, W), np.int64)
    )
    if len(face_ids) == 0:
        return empty

    zs = np.where(z > Z_NEAR, z, 1.0)
    pix = np.column_stack([K.fx * cam[:, 0] / zs + K.cx, K.fy * cam[:, 1] / zs + K.cy])
    f = faces[face_ids]
    x = pix[f, 0]
    y = pix[f, 1]
    area = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (y[:, 1] - y[:, 0]) * (x[:, 2] - x[:, 0])

    # normalise orientation so every kept triangle has positive signed area
    flip = area < 0
    f = f.copy()
    f[flip] = f[flip][:, [0, 2, 1]]
    x = pix[f, 0]
    y = pix[f, 1]
    area = np.abs(area)
    keep = area > 1e-12
    f, x, y, area, face_ids = f[keep], x[keep], y[keep], area[keep], face_ids[keep]
    if len(f) == 0:
        return empty

    # candidate pixels: per covered row, the span between the outermost edge
    # crossings (padded slightly); the exact edge test below decides coverage
    ymin = np.clip(np.ceil(y.min(axis=1) - 0.5), 0, H).astype(np.int64)
    ymax = np.clip(np.floor(y.max(axis=1) - 0.5), -1, H - 1).astype(np.int64)
    ny = np.maximum(ymax - ymin + 1, 0)
    if ny.sum() == 0:
        return empty
    row_tri = np.repeat(np.arange(len(f)), ny)
    row_y = (ymin[row_tri] + np.arange(ny.sum()) - (np.cumsum(ny) - ny)[row_tri]).astype(np.int64)
    yc = row_y + 0.5
    lo = np.full(len(row_tri), np.inf)
    hi = np.full(len(row_tri), -np.inf)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ax, ay = x[row_tri, a], y[row_tri, a]
        bx, by = x[row_tri, b], y[row_tri, b]
        dy = by - ay
        hit = (yc >= np.minimum(ay, by)) & (yc <= np.maximum(ay, by))
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = np.where(dy != 0, ax + (yc - ay) * (bx - ax) / dy, ax)
        lo = np.where(hit, np.minimum(lo, np.minimum(xi, np.where(dy == 0, bx, xi))), lo)
        hi = np.where(hit, np.maximum(hi, np.maximum(xi, np.where(dy == 0, bx, xi))), hi)
    pad = 1e-6 * (1.0 + np.abs(lo))
    finite = np.isfinite(lo)
    x0 = np.where(finite, np.clip(np.ceil(lo - pad - 0.5), 0, W), 0).astype(np.int64)
    x1 = np.where(finite, np.clip(np.floor(hi + pad - 0.5), -1, W - 1), -1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    total = int(nx.sum())
    if total == 0:
        return empty
    span = np.repeat(np.arange(len(row_tri)), nx)
    tri = row_tri[span]
    px = x0[span] + np.arange(total) - (np.cumsum(nx) - nx)[span]
    py = row_y[span]
    cx = px + 0.5
    cy = py + 0.5

    # e0: edge v1->v2 (weight of v0), e1: v2->v0 (v1), e2: v0->v1 (v2)
    edges = ((1, 2), (2, 0), (0, 1))
    table = np.empty((len(f), 3, 4))
    incl = np.empty((len(f), 3), bool)
    for k, (a, b) in enumerate(edges):
        table[:, k] = np.column_stack([x[:, a], y[:, a], x[:, b] - x[:, a], y[:, b] - y[:, a]])
        incl[:, k] = _edge_inclusive(x[:, a], y[:, a], x[:, b], y[:, b])
    tt = table[tri]  # one gather for all per-triangle edge data
    e = tt[:, :, 2] * (cy[:, None] - tt[:, :, 1]) - tt[:, :, 3] * (cx[:, None] - tt[:, :, 0])
    inside = np.all((e > 0) | ((e == 0) & incl[tri]), axis=1)
    if not inside.any():
        return empty

    tri, px, py, e = tri[inside], px[inside], py[inside], e[inside]
    bary = e / area[tri][:, None]
    zt = z[f[tri]]
    w = bary / zt
    inv_z = w.sum(axis=1)
    depth = 1.0 / inv_z
    lam = w / inv_z[:, None]

    pixel_id = py * W + px
    # stable sort, so equal depths keep ascending triangle order
    order = np.lexsort((depth, pixel_id))
    pid_sorted = pixel_id[order]
    first = np.ones(len(order), bool)
    first[1:] = pid_sorted[1:] != pid_sorted[:-1]
    win = order[first]

    vert_nocs = nocs_project(mesh.vertices, bounds)
    nocs_vals = np.einsum("nk,nkc->nc", lam[win], vert_nocs[f[tri[win]]])

    mask = np.zeros(H * W, bool)
    nocs = np.zeros((H * W, 3))
    dep = np.zeros(H * W)
    face = -np.ones(H * W, np.int64)
    ids = pixel_id[win]
    mask[ids] = True
    nocs[ids] = nocs_vals
    dep[ids] = depth[win]
    face[ids] = face_ids[tri[win]]
    return RenderOutput(mask.reshape(H, W), nocs.reshape(H, W, 3), dep.reshape(H, W), face.reshape(H, W))


def render_depth_16bit(output: RenderOutput, scale: float) -> np.ndarray:
    """Quantize rendered depth to uint16 counts of ``scale`` units; background is 0."""
    counts = np.where(output.mask, np.rint(output.depth / scale), 0.0)
    if counts.max(initial=0) > np.iinfo(np.uint16).max:
        raise OverflowError("depth exceeds 16-bit range at this scale")
    return counts.astype(np.uint16)


def screen_gradient(nocs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel d(NOCS)/du and d(NOCS)/dv, shape (H, W, 3, 2).

    Central differences where both neighbours are foreground, one-sided where
    only one is, zero for pixels isolated along that axis.
    """
    nocs = np.asarray(nocs, dtype=np.float64)
    mask = np.asarray(mask, bool)
    H, W = mask.shape
    grad = np.zeros((H, W, 3, 2))
    for axis, slot in ((1, 0), (0, 1)):
        n = np.moveaxis(nocs, axis, 0)
        m = np.moveaxis(mask, axis, 0)
        g = np.zeros_like(n)
        prev_ok = np.zeros_like(m)
        next_ok = np.zeros_like(m)
        prev_ok[1:] = m[:-1]
        next_ok[:-1] = m[1:]
        fwd = np.zeros_like(n)
        bwd = np.zeros_like(n)
        fwd[:-1] = n[1:] - n[:-1]
        bwd[1:] = n[1:] - n[:-1]
        both = m & prev_ok & next_ok
        only_next = m & next_ok & ~prev_ok
        only_prev = m & prev_ok & ~next_ok
        g[both] = 0.5 * (fwd[both] + bwd[both])
        g[only_next] = fwd[only_next]
        g[only_prev] = bwd[only_prev]
        grad[..., slot] = np.moveaxis(g, 0, axis)
    return grad


def face_screen_jacobian(
    mesh: Mesh, bounds: NocsBounds, pose: Pose, K: CameraIntrinsics, output: RenderOutput
) -> np.ndarray:
    """Exact d(NOCS)/du and d(NOCS)/dv from each pixel's winning face, (H, W, 3, 2).

    The visible point is the intersection of the pixel ray with the face plane,
    so its screen derivative follows from the plane alone. Background is zero.
    """
    H, W = output.shape
    grad = np.zeros((H, W, 3, 2))
    rows, cols = np.nonzero(output.mask)
    if len(rows) == 0:
        return grad
    tri = pose.apply(mesh.vertices)[mesh.faces[output.face[rows, cols]]]  # (P, 3, 3)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    u = cols + 0.5
    v = rows + 0.5
    r = np.column_stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])
    X = r * output.depth[rows, cols][:, None]  # depth is z, and r has unit z
    nr = np.einsum("pi,pi->p", n, r)
    for slot, (dr, scale) in enumerate((((1.0, 0.0, 0.0), 1.0 / K.fx), ((0.0, 1.0, 0.0), 1.0 / K.fy))):
        r_d = np.asarray(dr) * scale
        # X = s r with n.X fixed: dX = s r_d - (n.r_d / n.r) X
        dX = output.depth[rows, cols][:, None] * r_d - (n @ r_d / nr)[:, None] * X
        dm = dX @ pose.rotation  # back to model frame
        grad[rows, cols, :, slot] = dm / bounds.extent
    return grad
