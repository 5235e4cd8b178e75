"""Pose from correspondences: Kabsch, EPnP, their RANSAC wrappers, and
point-to-plane ICP.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .correspondence import CorrespondenceSet
from .geometry import CameraIntrinsics, GeometryError, Pose, axis_angle


class DegenerateConfiguration(GeometryError):
    pass


class NoConsensus(RuntimeError):
    def __init__(self, msg="no consensus"):
        super().__init__(msg)


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 300
    inlier_threshold: float = 2.0
    min_inlier_count: int = 12
    confidence: float = 0.995
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")


def pnp_config(**kw) -> RansacConfig:
    return RansacConfig(**{"inlier_threshold": 2.0, **kw})


def kabsch_config(diameter: float, **kw) -> RansacConfig:
    return RansacConfig(**{"inlier_threshold": 0.05 * diameter, **kw})


@dataclass(frozen=True, eq=False)
class SolveResult:
    pose: Pose
    inlier_indices: np.ndarray
    mean_inlier_residual: float
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "pose": self.pose.to_json(),
            "inlier_count": int(len(self.inlier_indices)),
            "mean_inlier_residual": float(self.mean_inlier_residual),
            "iterations": int(self.iterations),
        }


# ---------------------------------------------------------------------------
# Kabsch


def _kabsch(model: np.ndarray, observed: np.ndarray):
    """Least-squares R, t with ``observed ≈ model @ R.T + t``.

    Returns ``(R, t, reflected, singular_values)`` where ``reflected`` says the
    unconstrained orthogonal optimum had det -1 and was corrected.
    """
    mc = model.mean(axis=0)
    oc = observed.mean(axis=0)
    H = (model - mc).T @ (observed - oc)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return R, oc - R @ mc, d < 0, S


def kabsch(pairs: CorrespondenceSet) -> Pose:
    """Rigid transform minimising sum |R m + t - p|^2 over 3D-3D pairs."""
    if len(pairs) < 3:
        raise DegenerateConfiguration("kabsch needs at least 3 pairs")
    R, t, _, S = _kabsch(pairs.model, pairs.observed)
    if S[1] < 1e-12 * S[0] or S[0] == 0:
        raise DegenerateConfiguration("collinear or degenerate point set")
    return Pose(R, t)


def _canonical_order(pairs: CorrespondenceSet) -> np.ndarray:
    """Sort pairs by coordinates so RANSAC is independent of input order."""
    keys = np.column_stack([pairs.observed, pairs.model])
    return np.lexsort(keys.T[::-1])


def _required_iters(inlier_ratio: float, sample: int, confidence: float, cap: int) -> int:
    w = inlier_ratio ** sample
    if w <= 0:
        return cap
    if w >= 1:
        return 1
    return min(cap, int(math.ceil(math.log(1 - confidence) / math.log(1 - w))))


def _ransac(n, sample_size, cfg, fit, residuals, degenerate):
    """Generic hypothesise-and-verify loop over canonically ordered indices."""
    rng = np.random.default_rng(cfg.seed)
    best_count, best_inliers, best_model = -1, None, None
    needed = cfg.max_iters
    it = 0
    while it < min(needed, cfg.max_iters):
        it += 1
        sample = rng.choice(n, size=sample_size, replace=False)
        if degenerate(sample):
            continue
        try:
            model = fit(sample)
        except (GeometryError, np.linalg.LinAlgError):
            continue
        inl = np.nonzero(residuals(model) <= cfg.inlier_threshold)[0]
        if len(inl) > best_count:
            best_count, best_inliers, best_model = len(inl), inl, model
            needed = _required_iters(len(inl) / n, sample_size, cfg.confidence, cfg.max_iters)
    return best_model, best_inliers, it


def kabsch_ransac(pairs: CorrespondenceSet, cfg: RansacConfig) -> SolveResult:
    n = len(pairs)
    if n < 3:
        raise DegenerateConfiguration("kabsch_ransac needs at least 3 pairs")
    order = _canonical_order(pairs)
    M = pairs.model[order]
    P = pairs.observed[order]

    def fit(idx):
        return kabsch(CorrespondenceSet(P[idx], M[idx]))

    def residuals(pose):
        return np.linalg.norm(pose.apply(M) - P, axis=1)

    def degenerate(idx):
        a, b, c = M[idx]
        area = np.linalg.norm(np.cross(b - a, c - a))
        scale = max(np.linalg.norm(b - a), np.linalg.norm(c - a), 1e-300)
        return area < 1e-9 * scale * scale

    pose, inl, iters = _ransac(n, 3, cfg, fit, residuals, degenerate)
    if pose is None or len(inl) < min(cfg.min_inlier_count, n) or len(inl) < 3:
        raise NoConsensus()
    for _ in range(3):
        try:
            pose = fit(inl)
        except GeometryError:
            break
        new = np.nonzero(residuals(pose) <= cfg.inlier_threshold)[0]
        if np.array_equal(new, inl):
            break
        inl = new
    res = residuals(pose)
    inl = np.nonzero(res <= cfg.inlier_threshold)[0]
    if len(inl) < min(cfg.min_inlier_count, n) or len(inl) < 3:
        raise NoConsensus()
    return SolveResult(pose, np.sort(order[inl]), float(res[inl].mean()), iters)


# ---------------------------------------------------------------------------
# EPnP


def _reprojection_errors(K: CameraIntrinsics, pose: Pose, X, uv) -> np.ndarray:
    """Pixel errors; points at or behind the camera get +inf."""
    p = pose.apply(X)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * p[:, 0] / z + K.cx
        v = K.fy * p[:, 1] / z + K.cy
    err = np.hypot(u - uv[:, 0], v - uv[:, 1])
    return np.where(z > 0, err, np.inf)


def _control_points(X: np.ndarray):
    c0 = X.mean(axis=0)
    Xc = X - c0
    evals, evecs = np.linalg.eigh(Xc.T @ Xc / len(X))
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    if evals[0] <= 0:
        raise DegenerateConfiguration("all points coincide")
    planar = evals[2] < 1e-10 * evals[0]
    if evals[1] < 1e-10 * evals[0]:
        raise DegenerateConfiguration("collinear points")
    m = 2 if planar else 3
    axes = evecs[:, :m] * np.sqrt(evals[:m])
    C = np.vstack([c0, (c0 + axes.T)])
    coef = Xc @ np.linalg.pinv(axes.T)  # solve Xc = coef @ axes.T
    alphas = np.column_stack([1.0 - coef.sum(axis=1), coef])
    return C, alphas, planar


def _beta_monomials(N):
    return [(k, l) for k in range(N) for l in range(k, N)]


def _distance_system(V: np.ndarray, C: np.ndarray, N: int):
    """Quadratic forms Q_p (per control pair) with |Σβ d|² = βᵀ Q_p β, and targets."""
    m = len(C)
    Vc = V[:N].reshape(N, m, 3)
    Qs, rho = [], []
    for a, b in itertools.combinations(range(m), 2):
        d = Vc[:, a] - Vc[:, b]  # (N, 3)
        Qs.append(d @ d.T)
        rho.append(np.sum((C[a] - C[b]) ** 2))
    return np.array(Qs), np.array(rho)


def _linearized_betas(Q, rho, N) -> np.ndarray | None:
    mono = _beta_monomials(N)
    if len(mono) > len(rho):
        return None
    L = np.array([[q[k, l] * (1 if k == l else 2) for k, l in mono] for q in Q])
    sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
    b = dict(zip(mono, sol))
    beta = np.zeros(N)
    beta[0] = math.sqrt(abs(b[(0, 0)]))
    for k in range(1, N):
        s = 1.0 if b[(0, k)] * (1 if b[(0, 0)] >= 0 else -1) >= 0 else -1.0
        beta[k] = s * math.sqrt(abs(b[(k, k)]))
    return beta


def _refine_betas(Q, rho, beta, iters=10) -> np.ndarray:
    """Levenberg-Marquardt on the control-point distance constraints.

    ``beta`` may be (N,) or a batch (B, N) of independent starting points.
    """
    single = beta.ndim == 1
    beta = np.atleast_2d(np.array(beta, dtype=np.float64))
    B, N = beta.shape
    Qf = Q.reshape(len(Q), N * N)
    eye = np.eye(N)

    def resid(b):
        return np.einsum("bi,bj->bij", b, b).reshape(B, N * N) @ Qf.T - rho

    r = resid(beta)
    cost = np.einsum("bp,bp->b", r, r)
    tol = 1e-24 * (rho @ rho)
    lam = np.full(B, 1e-4)
    for _ in range(iters):
        if np.all(cost <= tol):
            break
        J = 2.0 * np.einsum("pij,bj->bpi", Q, beta)
        A = np.einsum("bpi,bpj->bij", J, J)
        g = np.einsum("bpi,bp->bi", J, r)
        damp = lam[:, None, None] * (A * eye + 1e-12 * eye)
        step = np.linalg.solve(A + damp, -g[..., None])[..., 0]
        new = beta + step
        r_new = resid(new)
        c_new = np.einsum("bp,bp->b", r_new, r_new)
        better = c_new < cost
        beta = np.where(better[:, None], new, beta)
        r = np.where(better[:, None], r_new, r)
        cost = np.where(better, c_new, cost)
        lam = np.where(better, np.maximum(lam * 0.1, 1e-12), lam * 10)
        if np.all(lam > 1e8):
            break
    return beta[0] if single else beta


def epnp(pairs: CorrespondenceSet, K: CameraIntrinsics, return_candidates: bool = False):
    """EPnP with four (or, for planar scenes, three) control points.

    Evaluates the null-space dimensions N = 1..3 (plus a Gauss-Newton
    N = 4 candidate for minimal sets) and keeps the candidate with the lowest
    mean reprojection error. ``return_candidates`` additionally returns a list
    of ``(N, pose, error)`` for every valid candidate.
    """
    X = pairs.model
    uv = pairs.observed
    n = len(X)
    if n < 4:
        raise DegenerateConfiguration("EPnP needs at least 4 pairs")
    C, alphas, planar = _control_points(X)
    m = len(C)
    xn = (uv[:, 0] - K.cx) / K.fx
    yn = (uv[:, 1] - K.cy) / K.fy
    M = np.zeros((2 * n, 3 * m))
    M[0::2, 0::3] = alphas
    M[0::2, 2::3] = -alphas * xn[:, None]
    M[1::2, 1::3] = alphas
    M[1::2, 2::3] = -alphas * yn[:, None]
    # the full square V is only needed when M has fewer rows than columns
    _, _, Vt = np.linalg.svd(M, full_matrices=M.shape[0] < M.shape[1])
    V = Vt[::-1]  # null-space candidates first

    max_n = 2 if planar else 3
    betas = []
    for N in range(1, max_n + 1):
        Q, rho = _distance_system(V, C, N)
        b = _linearized_betas(Q, rho, N)
        if b is not None:
            betas.append((N, _refine_betas(Q, rho, b)))

    candidates = []

    def evaluate(N, beta):
        Cc = (beta @ V[:N]).reshape(m, 3)
        Xc = alphas @ Cc
        if Xc[:, 2].mean() < 0:
            Xc = -Xc
        R, t, reflected, S = _kabsch(X, Xc)
        if reflected and S[2] > 1e-6 * S[0]:
            return None
        pose = Pose(R, t)
        err = _reprojection_errors(K, pose, X, uv)
        return pose, float(err.mean())

    for N, beta in betas:
        out = evaluate(N, beta)
        if out is not None:
            candidates.append((N, *out))

    if not planar and n == 4:
        # minimal sets leave a higher-dimensional null space; polish in N=4
        # from every lower-order solution and from a weak-perspective guess
        Q, rho = _distance_system(V, C, 4)
        inits = [np.concatenate([b, np.zeros(4 - N)]) for N, b in betas]
        rays = np.column_stack([xn, yn, np.ones(n)])
        num = sum(np.sum((X[i] - X[j]) ** 2) for i, j in itertools.combinations(range(n), 2))
        den = sum(np.sum((rays[i] - rays[j]) ** 2) for i, j in itertools.combinations(range(n), 2))
        Xc0 = rays * math.sqrt(num / max(den, 1e-300))
        Cc0, *_ = np.linalg.lstsq(alphas, Xc0, rcond=None)
        inits.append(V[:4] @ Cc0.ravel())
        polished = _refine_betas(Q, rho, np.array(inits), iters=40)
        r = np.einsum("bi,bj->bij", polished, polished).reshape(len(polished), 16) @ Q.reshape(len(Q), 16).T - rho
        for k in np.argsort(np.einsum("bp,bp->b", r, r))[:2]:
            b4 = polished[k]
            out = evaluate(4, b4)
            if out is not None:
                candidates.append((4, *out))

    finite = [c for c in candidates if np.isfinite(c[2])]
    if not finite:
        raise DegenerateConfiguration("no valid EPnP solution")
    best = min(finite, key=lambda c: c[2])
    if return_candidates:
        return best[1], candidates
    return best[1]


def refine_reprojection(pairs: CorrespondenceSet, K: CameraIntrinsics, pose: Pose, iters: int = 10) -> Pose:
    """Damped Gauss-Newton on pixel reprojection error; never increases it."""
    X, uv = pairs.model, pairs.observed

    def cost(p):
        e = _reprojection_errors(K, p, X, uv)
        return float(np.sum(e ** 2)) if np.all(np.isfinite(e)) else np.inf

    cur = cost(pose)
    lam = 1e-6
    for _ in range(iters):
        P = pose.apply(X)
        x, y, z = P.T
        r = np.concatenate([K.fx * x / z + K.cx - uv[:, 0], K.fy * y / z + K.cy - uv[:, 1]])
        Ju = np.zeros((len(X), 2, 3))
        Ju[:, 0, 0] = K.fx / z
        Ju[:, 0, 2] = -K.fx * x / z ** 2
        Ju[:, 1, 1] = K.fy / z
        Ju[:, 1, 2] = -K.fy * y / z ** 2
        RX = P - pose.translation
        skew = np.zeros((len(X), 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = RX[:, 2], -RX[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = -RX[:, 2], RX[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = RX[:, 1], -RX[:, 0]
        # dp/dω = -[RX]x, dp/dt = I
        Jp = np.concatenate([skew, np.broadcast_to(np.eye(3), (len(X), 3, 3))], axis=2)
        J = np.einsum("nij,njk->nik", Ju, Jp)
        J = np.concatenate([J[:, 0], J[:, 1]])
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(6):
            delta = np.linalg.solve(A + lam * np.diag(np.diag(A)) + 1e-300 * np.eye(6), -g)
            w = delta[:3]
            ang = np.linalg.norm(w)
            dR = axis_angle(w, ang) if ang > 0 else np.eye(3)
            cand = Pose(dR @ pose.rotation, dR @ pose.translation + delta[3:])
            c = cost(cand)
            if c < cur:
                pose, cur, lam, improved = cand, c, lam * 0.3, True
                break
            lam *= 10
        if not improved or np.linalg.norm(delta) < 1e-12:
            break
    return pose


def pnp_ransac(pairs: CorrespondenceSet, K: CameraIntrinsics, cfg: RansacConfig) -> SolveResult:
    n = len(pairs)
    if n < 4:
        raise DegenerateConfiguration("pnp_ransac needs at least 4 pairs")
    order = _canonical_order(pairs)
    ordered = pairs.subset(order)
    X, uv = ordered.model, ordered.observed

    def fit(idx):
        return epnp(ordered.subset(idx), K)

    def residuals(pose):
        return _reprojection_errors(K, pose, X, uv)

    def degenerate(idx):
        P = X[idx]
        s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
        return s[1] < 1e-9 * max(s[0], 1e-300)

    pose, inl, iters = _ransac(n, 4, cfg, fit, residuals, degenerate)
    if pose is None or len(inl) < min(cfg.min_inlier_count, n) or len(inl) < 4:
        raise NoConsensus()
    for _ in range(3):
        try:
            pose = epnp(ordered.subset(inl), K)
        except GeometryError:
            break
        pose = refine_reprojection(ordered.subset(inl), K, pose, iters=10)
        new = np.nonzero(residuals(pose) <= cfg.inlier_threshold)[0]
        if np.array_equal(new, inl) or len(new) < 4:
            break
        inl = new
    res = residuals(pose)
    inl = np.nonzero(res <= cfg.inlier_threshold)[0]
    if len(inl) < min(cfg.min_inlier_count, n) or len(inl) < 4:
        raise NoConsensus()
    return SolveResult(pose, np.sort(order[inl]), float(res[inl].mean()), iters)


# ---------------------------------------------------------------------------
# normals and ICP


def estimate_normals(cloud, k: int = 10) -> np.ndarray:
    """PCA normals from ``k`` nearest neighbours, oriented toward the origin."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if k < 3:
        raise ValueError("k must be at least 3")
    if k > len(cloud):
        raise ValueError("k exceeds cloud size")
    _, idx = cKDTree(cloud).query(cloud, k=k)
    nb = cloud[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("ni,ni->n", normals, cloud) > 0
    normals[flip] *= -1
    return normals


def _p2p_cost(tree, scene_normals, scene_points, pts, corr_dist):
    d, idx = tree.query(pts, distance_upper_bound=corr_dist)
    ok = np.isfinite(d)
    r = np.full(len(pts), corr_dist)
    q = scene_points[idx[ok]]
    r[ok] = np.minimum(np.abs(np.einsum("ni,ni->n", pts[ok] - q, scene_normals[idx[ok]])), corr_dist)
    return float(np.mean(r ** 2)), ok, idx


def icp_point_to_plane(
    model_cloud, scene_cloud, scene_normals, init: Pose, max_iters: int = 30, corr_dist: float = 1.0
) -> Pose:
    """Refine ``init`` so ``init.apply(model_cloud)`` lies on the scene's tangent planes.

    The cost is the mean squared point-to-plane distance, truncated at
    ``corr_dist`` for points without a neighbour in range; iterations that would
    raise it are rejected and end the loop.
    """
    model = np.asarray(model_cloud, dtype=np.float64)
    scene = np.asarray(scene_cloud, dtype=np.float64)
    normals = np.asarray(scene_normals, dtype=np.float64)
    tree = cKDTree(scene)
    pose = init
    cost, ok, idx = _p2p_cost(tree, normals, scene, pose.apply(model), corr_dist)
    if not ok.any():
        raise ValueError("no correspondences within corr_dist at the initial pose")
    for _ in range(max_iters):
        p = pose.apply(model)[ok]
        q = scene[idx[ok]]
        nrm = normals[idx[ok]]
        A = np.column_stack([np.cross(p, nrm), nrm])
        b = -np.einsum("ni,ni->n", p - q, nrm)
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
        ang = np.linalg.norm(x[:3])
        dR = axis_angle(x[:3], ang) if ang > 0 else np.eye(3)
        cand = Pose(dR @ pose.rotation, dR @ pose.translation + x[3:])
        c, ok_new, idx_new = _p2p_cost(tree, normals, scene, cand.apply(model), corr_dist)
        if c > cost or not ok_new.any():
            break
        pose, cost, ok, idx = cand, c, ok_new, idx_new
        if np.linalg.norm(x) < 1e-6:
            break
    return pose
