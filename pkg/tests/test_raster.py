import numpy as np
import pytest

from oracles import raycast
from nocspose.geometry import (
    CameraIntrinsics,
    GeometryError,
    Mesh,
    NocsBounds,
    Pose,
    box_mesh,
    compute_nocs_bounds,
    convex_blob_mesh,
    nocs_project,
    random_rotation,
)
from nocspose.raster import RenderOutput, face_screen_jacobian, render, render_depth_16bit, screen_gradient

K64 = CameraIntrinsics(60.0, 60.0, 32.0, 32.0, 64, 64)


def grid_mesh(n=4, step=0.25, z=0.0):
    g = np.mgrid[0:n + 1, 0:n + 1].reshape(2, -1).T
    v = np.column_stack([g * step - n * step / 2, np.full(len(g), z)])
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            faces += [[a, a + 1, a + n + 1], [a + 1, a + n + 2, a + n + 1]]
    return Mesh(v, faces)


def test_behind_camera_is_empty(blob, blob_bounds):
    out = render(blob, blob_bounds, Pose(np.eye(3), [0, 0, -5]), K64)
    assert not out.mask.any()
    assert (out.face == -1).all()


def test_zero_area_frame(blob, blob_bounds):
    with pytest.raises(GeometryError):
        render(blob, blob_bounds, Pose(np.eye(3), [0, 0, 3]), K64, width=0)


def test_single_triangle_matches_half_space_oracle():
    v = np.array([[-0.31, -0.23, 0.0], [0.37, -0.11, 0.0], [0.05, 0.41, 0.0]])
    mesh = Mesh(v, [[0, 1, 2]])
    bounds = NocsBounds((-1, -1, -1), (1, 1, 1))
    pose = Pose(np.eye(3), [0.0, 0.0, 2.0])
    out = render(mesh, bounds, pose, K64)
    p = v[:, :2] / 2.0 * 60.0 + 32.0
    y, x = np.mgrid[0:64, 0:64] + 0.5
    inside = np.ones((64, 64), bool)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        e = (p[b, 0] - p[a, 0]) * (y - p[a, 1]) - (p[b, 1] - p[a, 1]) * (x - p[a, 0])
        inside &= e > 0
    np.testing.assert_array_equal(out.mask, inside)
    np.testing.assert_allclose(out.depth[out.mask], 2.0)


def test_cube_center_pixel_nocs():
    cube = box_mesh()
    bounds = compute_nocs_bounds(cube)
    K = CameraIntrinsics(80.0, 80.0, 32.0, 32.0, 64, 64)
    pose = Pose(np.eye(3), [0.0, 0.0, 3.0])
    out = render(cube, bounds, pose, K)
    # ray through the center of pixel (32, 32) hits the front face z = 2.5
    ray = np.array([0.5 / 80.0, 0.5 / 80.0, 1.0])
    hit = ray * 2.5 - pose.translation
    np.testing.assert_allclose(out.nocs[32, 32], nocs_project(hit, bounds), atol=1e-12)
    assert out.depth[32, 32] == pytest.approx(2.5)


@pytest.mark.parametrize("seed", range(4))
def test_matches_ray_casting(seed):
    rng = np.random.default_rng(seed)
    mesh = convex_blob_mesh(seed, n_points=40)
    bounds = compute_nocs_bounds(mesh)
    pose = Pose(random_rotation(rng), [rng.normal() * 0.1, rng.normal() * 0.1, 2.5])
    out = render(mesh, bounds, pose, K64)
    depth, pts, _, _ = raycast(mesh, pose, K64)
    np.testing.assert_array_equal(out.mask, np.isfinite(depth))
    m = out.mask
    np.testing.assert_allclose(out.depth[m], depth[m], rtol=1e-6)
    np.testing.assert_allclose(out.nocs[m], nocs_project(pose.inverse().apply(pts[m]), bounds), atol=1e-4)


def test_shared_edges_cover_each_pixel_once():
    # pixel-aligned vertices put many pixel centers exactly on shared edges
    mesh = grid_mesh()
    bounds = NocsBounds((-1, -1, -1), (1, 1, 1))
    K = CameraIntrinsics(64.0, 64.0, 31.5, 31.5, 64, 64)
    pose = Pose(np.eye(3), [0.0, 0.0, 2.0])
    count = np.zeros((64, 64), int)
    for f in mesh.faces:
        count += render(Mesh(mesh.vertices, [f]), bounds, pose, K).mask
    assert count.max() == 1
    full = render(mesh, bounds, pose, K).mask
    np.testing.assert_array_equal(full, count == 1)
    rows, cols = np.nonzero(full)
    # the union is a solid rectangle: no gaps along internal edges
    assert full[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()


def test_reordering_invariance(blob, blob_bounds, rng):
    pose = Pose(random_rotation(rng), [0.0, 0.0, 3.0])
    ref = render(blob, blob_bounds, pose, K64)
    perm_v = rng.permutation(len(blob.vertices))
    inv = np.argsort(perm_v)
    faces = inv[blob.faces][rng.permutation(len(blob.faces))]
    faces = np.roll(faces, 1, axis=1)
    other = render(Mesh(blob.vertices[perm_v], faces), blob_bounds, pose, K64)
    np.testing.assert_array_equal(ref.mask, other.mask)
    np.testing.assert_allclose(ref.depth, other.depth, atol=1e-12)


def test_render_is_deterministic(blob, blob_bounds, rng):
    pose = Pose(random_rotation(rng), [0.0, 0.0, 3.0])
    a = render(blob, blob_bounds, pose, K64)
    b = render(blob, blob_bounds, pose, K64)
    for name in ("mask", "nocs", "depth", "face"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_no_back_face_culling():
    v = np.array([[-0.3, -0.3, 0.0], [0.3, -0.3, 0.0], [0.0, 0.3, 0.0]])
    bounds = NocsBounds((-1, -1, -1), (1, 1, 1))
    pose = Pose(np.eye(3), [0, 0, 2.0])
    a = render(Mesh(v, [[0, 1, 2]]), bounds, pose, K64).mask
    b = render(Mesh(v, [[0, 2, 1]]), bounds, pose, K64).mask
    assert a.any()
    np.testing.assert_array_equal(a, b)


def _output(depth, mask):
    H, W = depth.shape
    return RenderOutput(mask, np.zeros((H, W, 3)), np.where(mask, depth, 0.0), np.where(mask, 0, -1))


def test_depth_16bit():
    mask = np.array([[True, False]])
    out = _output(np.array([[1000.0, 0.0]]), mask)
    np.testing.assert_array_equal(render_depth_16bit(out, 1.0), [[1000, 0]])
    np.testing.assert_array_equal(render_depth_16bit(_output(np.array([[1000.4, 5.0]]), mask), 1.0), [[1000, 0]])
    with pytest.raises(OverflowError):
        render_depth_16bit(_output(np.array([[70000.0, 0.0]]), mask), 1.0)


def test_screen_gradient_linear_and_constant():
    y, x = np.mgrid[0:20, 0:30].astype(float)
    nocs = np.stack([0.01 * x, 0.02 * y, 0.003 * x - 0.004 * y], axis=-1)
    mask = np.ones((20, 30), bool)
    g = screen_gradient(nocs, mask)
    np.testing.assert_allclose(g[..., 0], np.broadcast_to([0.01, 0.0, 0.003], (20, 30, 3)), atol=1e-15)
    np.testing.assert_allclose(g[..., 1], np.broadcast_to([0.0, 0.02, -0.004], (20, 30, 3)), atol=1e-15)
    assert not screen_gradient(np.full((5, 5, 3), 0.3), np.ones((5, 5), bool)).any()


def test_screen_gradient_quadratic(rng):
    a, b, c, d, e = rng.normal(size=5) * 1e-3
    y, x = np.mgrid[0:16, 0:16].astype(float)
    f = a * x * x + b * x * y + c * y * y + d * x + e * y
    nocs = np.repeat(f[..., None], 3, axis=-1)
    g = screen_gradient(nocs, np.ones((16, 16), bool))
    # central differences are exact on quadratics; one-sided ones err by the curvature term
    interior = (slice(1, -1), slice(1, -1))
    np.testing.assert_allclose(g[interior][..., 0, 0], (2 * a * x + b * y + d)[interior], atol=1e-12)
    np.testing.assert_allclose(g[interior][..., 0, 1], (b * x + 2 * c * y + e)[interior], atol=1e-12)
    border = np.abs(g[:, 0, 0, 0] - (b * y[:, 0] + d))
    assert border.max() <= abs(a) + 1e-12


def test_screen_gradient_isolated_and_one_sided():
    nocs = np.zeros((3, 5, 3))
    nocs[1, :, 0] = [0, 1, 3, 6, 0]
    mask = np.zeros((3, 5), bool)
    mask[1, 0:4] = True
    g = screen_gradient(nocs, mask)
    np.testing.assert_allclose(g[1, :, 0, 0], [1.0, 1.5, 2.5, 3.0, 0.0])
    assert not g[1, :, 0, 1].any()  # vertically isolated
    assert not g[0].any() and not g[2].any()


def test_face_jacobian_matches_differences(blob, blob_bounds, rng):
    K = CameraIntrinsics(150.0, 150.0, 64.0, 64.0, 128, 128)
    pose = Pose(random_rotation(rng), [0.0, 0.0, 2.5])
    out = render(blob, blob_bounds, pose, K)
    J = face_screen_jacobian(blob, blob_bounds, pose, K, out)
    # shift the principal point by a sub-pixel amount: same as moving the sample position
    h = 1e-3
    for slot, (dx, dy) in enumerate(((h, 0.0), (0.0, h))):
        plus = render(blob, blob_bounds, pose, CameraIntrinsics(K.fx, K.fy, K.cx - dx, K.cy - dy, 128, 128))
        minus = render(blob, blob_bounds, pose, CameraIntrinsics(K.fx, K.fy, K.cx + dx, K.cy + dy, 128, 128))
        same = out.mask & plus.mask & minus.mask & (plus.face == out.face) & (minus.face == out.face)
        fd = (plus.nocs - minus.nocs) / (2 * h)
        np.testing.assert_allclose(J[same][:, :, slot], fd[same], atol=1e-6)
