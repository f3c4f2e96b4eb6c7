"""Rigid-body geometry: poses, twists, camera projection, point clouds.

Conventions used throughout the package:
  * quaternions are (w, x, y, z), unit norm, Hamilton convention;
  * a pose maps object coordinates into camera coordinates
    (``x_cam = R @ x_obj + t``), with the camera x right, y down, z forward;
  * twist increments are applied right-multiplicatively,
    ``P <- P * exp(twist)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMask, NonPositiveDepth, TooFewPoints

_QUAT_NORM_TOL = 1e-9
_MIN_DEPTH = 1e-9


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Convert a unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Convert a 3x3 rotation matrix to a unit quaternion (w, x, y, z)."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (R[2, 1] - R[1, 2]) * s
        y = (R[0, 2] - R[2, 0]) * s
        z = (R[1, 0] - R[0, 1]) * s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return _quat_normalize(np.array([w, x, y, z]))


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


@dataclass(frozen=True)
class Twist:
    """Local SE(3) increment: rotational part (radians) + translational part (meters)."""

    omega: np.ndarray
    v: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.omega, float), np.asarray(self.v, float)])

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64)
        return Twist(omega=xi[:3].copy(), v=xi[3:].copy())


@dataclass(frozen=True)
class RigidPose:
    """SE(3) element stored as a unit quaternion (w, x, y, z) plus translation in meters."""

    quat: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", _quat_normalize(self.quat))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())
        self.quat.flags.writeable = False
        self.t.flags.writeable = False

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "RigidPose":
        T = np.asarray(T, dtype=np.float64)
        return RigidPose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rotation(R: np.ndarray, t: np.ndarray | None = None) -> "RigidPose":
        return RigidPose(matrix_to_quat(R), np.zeros(3) if t is None else t)

    @staticmethod
    def from_axis_angle(axis: np.ndarray, angle_rad: float,
                        t: np.ndarray | None = None) -> "RigidPose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle_rad
        quat = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return RigidPose(quat, np.zeros(3) if t is None else t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "RigidPose":
        Rt = self.R.T
        return RigidPose(matrix_to_quat(Rt), -Rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many points (N, 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def rotation_angle_deg(self) -> float:
        """Rotation angle of this pose in degrees."""
        w = min(1.0, abs(float(self.quat[0])))
        return float(np.degrees(2.0 * np.arccos(w)))


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose that applies ``b`` first, then ``a``."""
    quat = _quat_normalize(quat_multiply(a.quat, b.quat))
    return RigidPose(quat, a.R @ b.t + a.t)


def geodesic_distance(a: RigidPose, b: RigidPose) -> float:
    """Rotation angle in degrees between two poses, range [0, 180].

    Invariant under the quaternion double cover (q and -q give 0).
    """
    dot = abs(float(np.dot(a.quat, b.quat)))
    dot = min(1.0, dot)
    return float(np.degrees(2.0 * np.arccos(dot)))


def exp_twist(twist: Twist) -> RigidPose:
    """SE(3) exponential of a twist (Rodrigues + V-matrix translation coupling)."""
    omega = np.asarray(twist.omega, dtype=np.float64)
    v = np.asarray(twist.v, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        # Second-order Taylor expansions keep exp/log consistent near zero.
        R = np.eye(3) + K + 0.5 * (K @ K)
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + (s / theta) * K + ((1 - c) / theta**2) * (K @ K)
        V = (np.eye(3) + ((1 - c) / theta**2) * K
             + ((theta - s) / theta**3) * (K @ K))
    return RigidPose(matrix_to_quat(R), V @ v)


def log_pose(pose: RigidPose) -> Twist:
    """SE(3) logarithm; valid for rotation angles below pi."""
    R = pose.R
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        omega = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
        K = skew(omega)
        V_inv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        omega = (theta / (2.0 * np.sin(theta))) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        K = skew(omega)
        half = theta / 2.0
        V_inv = (np.eye(3) - 0.5 * K
                 + ((1.0 - half * np.cos(half) / np.sin(half)) / theta**2) * (K @ K))
    return Twist(omega=omega, v=V_inv @ pose.t)


def apply_twist(pose: RigidPose, xi: np.ndarray) -> RigidPose:
    """Right-multiplicative update ``pose * exp(xi)`` with xi = (omega, v)."""
    return compose(pose, exp_twist(Twist.from_vector(xi)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels plus the stored-depth-to-meter scale."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


def project(K: CameraIntrinsics, p: np.ndarray) -> tuple[float, float, float]:
    """Project a camera-frame point to (u, v) pixels and return its depth.

    Raises:
        NonPositiveDepth: if ``p[2] <= 1e-9``.
    """
    x, y, z = np.asarray(p, dtype=np.float64)
    if z <= _MIN_DEPTH:
        raise NonPositiveDepth(f"depth {z} is not positive")
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy, float(z))


def project_points(K: CameraIntrinsics, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) camera-frame points.

    Returns:
        (uv, z): (N, 2) pixel coordinates and (N,) depths. Points with
        non-positive depth get NaN pixels.
    """
    pts = np.asarray(pts, dtype=np.float64)
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pts[:, 0] / z + K.cx
        v = K.fy * pts[:, 1] / z + K.cy
    uv = np.stack([u, v], axis=1)
    uv[z <= _MIN_DEPTH] = np.nan
    return uv, z


def look_at_pose(eye: np.ndarray, target: np.ndarray,
                 up: np.ndarray = (0.0, 0.0, 1.0)) -> RigidPose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    Uses the y-down/z-forward camera convention; ``up`` fixes the roll.
    Falls back to the world x axis when the view direction is parallel to up.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    y0 = -np.asarray(up, dtype=np.float64)
    x = np.cross(y0, z)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(-np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    return RigidPose(matrix_to_quat(R), -R @ eye)


@dataclass
class PointCloud:
    """Metric 3D points with optional unit normals and [0, 1] RGB colors."""

    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    degenerate: np.ndarray | None = None  # per-point flag from normal estimation

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: RigidPose) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ pose.R.T
        return PointCloud(pose.apply(self.points), normals, self.colors, self.degenerate)


def backproject(K: CameraIntrinsics, depth: np.ndarray,
                mask: np.ndarray | None = None,
                colors: np.ndarray | None = None) -> PointCloud:
    """Lift masked pixels with finite positive depth into a camera-frame cloud.

    Args:
        K: intrinsics matching the depth map shape.
        depth: (H, W) metric depth, 0 or non-finite marks invalid.
        mask: optional (H, W) boolean; defaults to all pixels.
        colors: optional (H, W, 3) image sampled into the cloud.

    Raises:
        EmptyMask: when no pixel is both masked and validly deep.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics "
                         f"({K.height}, {K.width})")
    valid = np.isfinite(depth) & (depth > _MIN_DEPTH)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    vv, uu = np.nonzero(valid)
    if vv.size == 0:
        raise EmptyMask("no valid masked pixels to backproject")
    z = depth[vv, uu]
    x = (uu - K.cx) / K.fx * z
    y = (vv - K.cy) / K.fy * z
    cloud_colors = None
    if colors is not None:
        cloud_colors = np.asarray(colors, dtype=np.float64)[vv, uu]
    return PointCloud(np.stack([x, y, z], axis=1), colors=cloud_colors)


def estimate_normals(cloud: PointCloud, radius: float = 0.01,
                     max_neighbors: int = 30) -> PointCloud:
    """Estimate per-point normals from local covariance eigendecomposition.

    Normals are the smallest-eigenvector of each neighborhood's covariance,
    oriented to face the camera origin. Points with fewer than 3 neighbors
    (self included) are flagged degenerate and get the view direction.

    Raises:
        TooFewPoints: fewer than 3 points in the cloud.
    """
    pts = cloud.points
    if len(pts) < 3:
        raise TooFewPoints(f"need >= 3 points, got {len(pts)}")
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, r=radius)
    normals = np.empty_like(pts)
    degenerate = np.zeros(len(pts), dtype=bool)
    for i, idx in enumerate(neighborhoods):
        if len(idx) > max_neighbors:
            d = np.linalg.norm(pts[idx] - pts[i], axis=1)
            idx = [idx[j] for j in np.argsort(d)[:max_neighbors]]
        if len(idx) < 3:
            degenerate[i] = True
            n = -pts[i]
            norm = np.linalg.norm(n)
            normals[i] = n / norm if norm > 0 else np.array([0.0, 0.0, -1.0])
            continue
        local = pts[idx]
        cov = np.cov(local.T, bias=True)
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, 0]
        # orient toward the camera at the origin
        if np.dot(n, pts[i]) > 0:
            n = -n
        normals[i] = n
    return PointCloud(pts, normals=normals, colors=cloud.colors, degenerate=degenerate)
