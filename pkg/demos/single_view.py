"""Single-view pose from a noisy NOCS map: PnP versus depth-based Kabsch.

Renders a procedural object, corrupts its NOCS map the way a network
prediction would be wrong, then recovers the pose with each solver.

    python3 demos/single_view.py
"""
from nocspose import CameraIntrinsics, NocsMap, NoiseConfig, Pose, compute_nocs_bounds, render, simulate_prediction
from nocspose.correspondence import extract_2d3d, extract_3d3d
from nocspose.geometry import axis_angle, convex_blob_mesh
from nocspose.metrics import add_metric
from nocspose.solvers import kabsch_config, kabsch_ransac, pnp_ransac, RansacConfig

mesh = convex_blob_mesh(3)
bounds = compute_nocs_bounds(mesh)
K = CameraIntrinsics(300.0, 300.0, 128.0, 128.0, 256, 256)
gt = Pose(axis_angle([1, 1, 0], 0.7), [0.1, -0.05, 3.0])

out = render(mesh, bounds, gt, K)
clean = NocsMap.from_render(out)
noisy = simulate_prediction(clean, NoiseConfig(bin_sigma=2.0, dropout_frac=0.1, outlier_frac=0.05, seed=0))
print(f"object diameter {mesh.diameter:.3f}, {clean.mask.sum()} foreground pixels")

# RGB only: pixel <-> model point pairs
pnp = pnp_ransac(extract_2d3d(noisy, bounds), K, RansacConfig(seed=0))
print(f"PnP    ADD = {add_metric(pnp.pose, gt, mesh) / mesh.diameter:.4f} D, {len(pnp.inlier_indices)} inliers")

# with depth: back-projected camera points <-> model points
pairs = extract_3d3d(noisy, out.depth, K, bounds)
kab = kabsch_ransac(pairs, kabsch_config(mesh.diameter, seed=0))
print(f"Kabsch ADD = {add_metric(kab.pose, gt, mesh) / mesh.diameter:.4f} D, {len(kab.inlier_indices)} inliers")
