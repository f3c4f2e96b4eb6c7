"""Coarse robust pose solving and dense point-to-plane ICP refinement.

The robust solver follows the two-stage recipe of fast certifiable
registration pipelines: pairwise length-consistency voting prunes gross
outliers (rigid motion preserves distances), then graduated non-convexity
with a truncated-least-squares kernel anneals a weighted Procrustes fit
from all-inlier least squares down to a hard inlier set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoOverlap, SolverDegenerate, TooFewCorrespondences
from .geom import CameraIntrinsics, PointCloud, RigidPose, apply_twist, matrix_to_quat
from .synth import CorrespondenceSet


@dataclass
class Correspondence3D:
    """A matched metric point pair across two camera frames."""

    point_a: np.ndarray
    point_b: np.ndarray
    weight: float = 1.0


@dataclass
class RegistrationResult:
    """Solved relative pose with the surviving inlier set."""

    pose: RigidPose
    inlier_mask: np.ndarray
    mean_residual: float
    converged: bool


def _bilinear(depth: np.ndarray, u: float, v: float) -> float:
    """Bilinear depth sample; returns 0 if any participating pixel is invalid."""
    H, W = depth.shape
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u1, v1 = min(u0 + 1, W - 1), min(v0 + 1, H - 1)
    u0, v0 = max(u0, 0), max(v0, 0)
    fu, fv = u - u0, v - v0
    d00, d01 = depth[v0, u0], depth[v0, u1]
    d10, d11 = depth[v1, u0], depth[v1, u1]
    if min(d00, d01, d10, d11) <= 0:
        return 0.0
    return float((d00 * (1 - fu) + d01 * fu) * (1 - fv)
                 + (d10 * (1 - fu) + d11 * fu) * fv)


def lift_correspondences(cs: CorrespondenceSet, depth_a: np.ndarray,
                         depth_b: np.ndarray, K: CameraIntrinsics
                         ) -> list[Correspondence3D]:
    """Backproject visible 2D matches into 3D pairs using both depth maps.

    Pairs whose depth is invalid at either endpoint are dropped.

    Raises:
        TooFewCorrespondences: fewer than 4 pairs survive.
    """
    out = []
    for i in range(len(cs)):
        if not cs.visible[i]:
            continue
        ua, va = cs.pix_a[i]
        ub, vb = cs.pix_b[i]
        za = _bilinear(depth_a, float(ua), float(va))
        zb = _bilinear(depth_b, float(ub), float(vb))
        if za <= 0 or zb <= 0:
            continue
        pa = np.array([(ua - K.cx) / K.fx * za, (va - K.cy) / K.fy * za, za])
        pb = np.array([(ub - K.cx) / K.fx * zb, (vb - K.cy) / K.fy * zb, zb])
        out.append(Correspondence3D(pa, pb))
    if len(out) < 4:
        raise TooFewCorrespondences(f"only {len(out)} valid pairs")
    return out


def _weighted_procrustes(A: np.ndarray, B: np.ndarray, w: np.ndarray) -> RigidPose:
    """Weighted Kabsch: pose minimizing sum w_i ||R a_i + t - b_i||^2.

    Raises:
        SolverDegenerate: effectively < 3 weighted points or rank-deficient
        (e.g. collinear) configuration.
    """
    w_sum = w.sum()
    if w_sum <= 0 or np.count_nonzero(w > 1e-9) < 3:
        raise SolverDegenerate("fewer than 3 effective correspondences")
    ca = (w[:, None] * A).sum(axis=0) / w_sum
    cb = (w[:, None] * B).sum(axis=0) / w_sum
    H = ((A - ca) * w[:, None]).T @ (B - cb)
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise SolverDegenerate("rank-deficient point configuration")
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return RigidPose(matrix_to_quat(R), cb - R @ ca)


def _length_consistency_prune(A: np.ndarray, B: np.ndarray,
                              inlier_threshold: float,
                              samples_per_point: int = 30,
                              rng_seed: int = 0) -> np.ndarray:
    """Keep correspondences that preserve pairwise lengths with enough partners."""
    n = len(A)
    k = min(samples_per_point, n - 1)
    rng = np.random.default_rng(rng_seed)
    votes = np.zeros(n)
    partners = np.empty((n, k), dtype=int)
    for i in range(n):
        choice = rng.choice(n - 1, size=k, replace=False)
        choice[choice >= i] += 1
        partners[i] = choice
    dA = np.linalg.norm(A[:, None, :] - A[partners], axis=2)
    dB = np.linalg.norm(B[:, None, :] - B[partners], axis=2)
    consistent = np.abs(dA - dB) <= 2.0 * inlier_threshold
    votes = consistent.sum(axis=1)
    # outliers agree with almost nothing; inliers cluster near the top count
    keep = votes >= max(3, 0.5 * votes.max())
    return keep


def robust_register(pairs: list[Correspondence3D],
                    inlier_threshold: float = 0.01,
                    gnc_factor: float = 1.4,
                    max_outer_iters: int = 50) -> RegistrationResult:
    """Robust rigid registration of 3D correspondences (prune + GNC-TLS).

    Args:
        pairs: matched point pairs; weights are used as a prior mask.
        inlier_threshold: residual (meters) separating inliers from outliers.

    Raises:
        SolverDegenerate: all pairs pruned or geometry rank-deficient.
    """
    if len(pairs) < 4:
        raise TooFewCorrespondences(f"need >= 4 pairs, got {len(pairs)}")
    A = np.array([p.point_a for p in pairs])
    B = np.array([p.point_b for p in pairs])

    keep = _length_consistency_prune(A, B, inlier_threshold)
    if np.count_nonzero(keep) < 3:
        raise SolverDegenerate("length-consistency pruning removed everything")
    idx = np.nonzero(keep)[0]
    As, Bs = A[idx], B[idx]

    c2 = inlier_threshold**2
    w = np.ones(len(As))
    pose = _weighted_procrustes(As, Bs, w)
    res2 = np.sum((pose.apply(As) - Bs) ** 2, axis=1)
    # control starts at max residual^2 / threshold^2 and shrinks by gnc_factor;
    # the equivalent TLS surrogate parameter mu rises toward the hard kernel
    control = max(res2.max() / c2, 1.0 + 1e-6)
    for _ in range(max_outer_iters):
        mu = max(1.0 / (2.0 * control - 1.0), 1e-10)
        th_out = (mu + 1.0) / mu * c2
        th_in = mu / (mu + 1.0) * c2
        w_new = np.empty_like(w)
        w_new[res2 >= th_out] = 0.0
        w_new[res2 <= th_in] = 1.0
        mid = (res2 > th_in) & (res2 < th_out)
        w_new[mid] = np.sqrt(c2 * mu * (mu + 1.0) / res2[mid]) - mu
        delta = np.abs(w_new - w).sum()
        w = w_new
        try:
            pose = _weighted_procrustes(As, Bs, w)
        except SolverDegenerate:
            raise
        res2 = np.sum((pose.apply(As) - Bs) ** 2, axis=1)
        control /= gnc_factor
        if control <= 1.0 and delta < 1e-8:
            break

    # classify every input pair against the final pose, not just prune survivors
    full_res = np.linalg.norm(pose.apply(A) - B, axis=1)
    inliers = full_res <= inlier_threshold
    mean_res = float(full_res[inliers].mean()) if inliers.any() else float("inf")
    return RegistrationResult(pose=pose, inlier_mask=inliers,
                              mean_residual=mean_res, converged=bool(inliers.any()))


def icp_point_to_plane(source: PointCloud, target: PointCloud,
                       init: RigidPose | None = None,
                       max_iters: int = 30, tolerance: float = 1e-6,
                       inlier_threshold: float = 0.01,
                       normal_angle_limit_deg: float = 60.0) -> RegistrationResult:
    """Point-to-plane ICP aligning ``source`` onto ``target`` (needs normals).

    Correspondences beyond 3x the median distance or with normals more than
    ``normal_angle_limit_deg`` apart are rejected each iteration. Steps that
    would increase the mean point-to-plane error are rejected, so the error
    is non-increasing across accepted iterations.

    Raises:
        NoOverlap: median association distance at init exceeds 5x the
            inlier threshold.
        ValueError: target has no normals or either cloud is empty.
    """
    if target.normals is None:
        raise ValueError("target cloud needs normals")
    if len(source) == 0 or len(target) == 0:
        raise ValueError("clouds must be non-empty")
    pose = init if init is not None else RigidPose.identity()
    tree = cKDTree(target.points)
    src = source.points

    moved = pose.apply(src)
    dists, _ = tree.query(moved)
    if np.median(dists) > 5.0 * inlier_threshold:
        raise NoOverlap(f"median association distance {np.median(dists):.4f} m")

    def mean_p2pl_error(p: RigidPose) -> tuple[float, np.ndarray, np.ndarray]:
        m = p.apply(src)
        d, j = tree.query(m)
        gate = d <= 3.0 * max(np.median(d), 1e-9)
        n = target.normals[j]
        if source.normals is not None:
            src_n = source.normals @ p.R.T
            cos_limit = np.cos(np.radians(normal_angle_limit_deg))
            gate &= np.einsum("ij,ij->i", src_n, n) >= cos_limit
        r = np.einsum("ij,ij->i", target.points[j] - m, n)
        err = float(np.abs(r[gate]).mean()) if gate.any() else float("inf")
        return err, m, gate

    best_err, _, _ = mean_p2pl_error(pose)
    converged = False
    for _ in range(max_iters):
        moved = pose.apply(src)
        dists, nn = tree.query(moved)
        gate = dists <= 3.0 * max(np.median(dists), 1e-9)
        normals = target.normals[nn]
        if source.normals is not None:
            src_normals = source.normals @ pose.R.T
            cos_limit = np.cos(np.radians(normal_angle_limit_deg))
            gate &= np.einsum("ij,ij->i", src_normals, normals) >= cos_limit
        if np.count_nonzero(gate) < 6:
            break
        p = moved[gate]
        n = normals[gate]
        q = target.points[nn[gate]]
        b = np.einsum("ij,ij->i", q - p, n)
        Amat = np.hstack([np.cross(p, n), n])
        xi, *_ = np.linalg.lstsq(Amat, b, rcond=None)
        # left-multiplicative step in world coords: moved' = exp(xi) * moved
        step = apply_twist(RigidPose.identity(), xi)
        candidate = RigidPose(
            matrix_to_quat(step.R @ pose.R), step.R @ pose.t + step.t)
        err, _, _ = mean_p2pl_error(candidate)
        if err > best_err + 1e-12:
            break
        pose = candidate
        best_err = err
        if np.linalg.norm(xi) < tolerance:
            converged = True
            break

    moved = pose.apply(src)
    dists, _ = tree.query(moved)
    inliers = dists <= 3.0 * max(np.median(dists), 1e-9)
    return RegistrationResult(pose=pose, inlier_mask=inliers,
                              mean_residual=best_err, converged=converged)
