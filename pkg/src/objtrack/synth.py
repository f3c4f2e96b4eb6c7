"""Synthetic RGB-D sequence generation and a ground-truth correspondence oracle.

Objects are implicit primitives (sphere, box, cylinder, unions of those)
raycast analytically, so depth maps and masks are exact. The correspondence
oracle transfers pixels between frames through the known geometry and stands
in for learned keypoint trackers; its noise model emulates their failure
modes (jitter, outliers, dropouts, occlusion-driven visibility loss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateTrajectory, EmptyMask, EmptySet
from .geom import CameraIntrinsics, RigidPose, compose, project_points

_OCCLUSION_TOL = 0.002  # meters; transferred point vs rendered depth


# ---------------------------------------------------------------------------
# Implicit primitives
# ---------------------------------------------------------------------------

class Primitive:
    """Implicit solid with analytic ray intersection, normals, and SDF."""

    bounding_radius: float = 0.0

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """First positive hit parameter per ray, inf where the ray misses."""
        raise NotImplementedError

    def normal(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Sphere(Primitive):
    radius: float = 0.05

    def __post_init__(self):
        self.bounding_radius = self.radius

    def intersect(self, origins, dirs):
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * np.einsum("ij,ij->i", origins, dirs)
        c = np.einsum("ij,ij->i", origins, origins) - self.radius**2
        disc = b * b - 4.0 * a * c
        t = np.full(len(dirs), np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
        near = np.where(t0 > 1e-9, t0, t1)
        t[hit & (near > 1e-9)] = near[hit & (near > 1e-9)]
        return t

    def normal(self, pts):
        n = np.linalg.norm(pts, axis=-1, keepdims=True)
        return pts / np.maximum(n, 1e-12)

    def sdf(self, pts):
        return np.linalg.norm(pts, axis=-1) - self.radius


@dataclass
class Box(Primitive):
    half_extents: np.ndarray = field(default_factory=lambda: np.array([0.04, 0.03, 0.06]))

    def __post_init__(self):
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        self.bounding_radius = float(np.linalg.norm(self.half_extents))

    def intersect(self, origins, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (-self.half_extents - origins) * inv
            t2 = (self.half_extents - origins) * inv
        # rays parallel to a slab: hit iff origin inside that slab
        parallel = dirs == 0.0
        inside = np.abs(origins) <= self.half_extents
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tmin = lo.max(axis=-1)
        tmax = hi.min(axis=-1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        t = np.where((tmax >= np.maximum(tmin, 0.0)) & (t > 1e-9), t, np.inf)
        return t

    def normal(self, pts):
        # face with the smallest remaining wall distance wins
        d = self.half_extents - np.abs(pts)
        axis = np.argmin(d, axis=-1)
        n = np.zeros_like(pts)
        rows = np.arange(len(pts))
        n[rows, axis] = np.sign(pts[rows, axis])
        return n

    def sdf(self, pts):
        q = np.abs(pts) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)


@dataclass
class Cylinder(Primitive):
    """Capped cylinder along the local z axis, centered at the origin."""

    radius: float = 0.033
    half_height: float = 0.06

    def __post_init__(self):
        self.bounding_radius = float(math.hypot(self.radius, self.half_height))

    def intersect(self, origins, dirs):
        ox, oy, oz = origins[:, 0], origins[:, 1], origins[:, 2]
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        best = np.full(len(dirs), np.inf)
        # lateral surface
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius**2
        disc = b * b - 4.0 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            for sign in (-1.0, 1.0):
                t = (-b + sign * sq) / (2.0 * a)
                z = oz + t * dz
                ok = (disc >= 0) & (a > 0) & (t > 1e-9) & (np.abs(z) <= self.half_height)
                best = np.where(ok & (t < best), t, best)
            # caps
            for cap in (-self.half_height, self.half_height):
                t = (cap - oz) / dz
                x = ox + t * dx
                y = oy + t * dy
                ok = (dz != 0) & (t > 1e-9) & (x * x + y * y <= self.radius**2)
                best = np.where(ok & (t < best), t, best)
        return best

    def normal(self, pts):
        radial = np.linalg.norm(pts[:, :2], axis=-1)
        cap_gap = self.half_height - np.abs(pts[:, 2])
        side_gap = np.abs(self.radius - radial)
        n = np.zeros_like(pts)
        use_cap = cap_gap < side_gap
        n[use_cap, 2] = np.sign(pts[use_cap, 2])
        r = np.maximum(radial[~use_cap], 1e-12)
        n[~use_cap, 0] = pts[~use_cap, 0] / r
        n[~use_cap, 1] = pts[~use_cap, 1] / r
        return n

    def sdf(self, pts):
        radial = np.linalg.norm(pts[:, :2], axis=-1)
        d = np.stack([radial - self.radius, np.abs(pts[:, 2]) - self.half_height], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0.0)


@dataclass
class Composite(Primitive):
    """Union of posed child primitives (child pose maps child to object coords)."""

    parts: list[tuple[Primitive, RigidPose]] = field(default_factory=list)

    def __post_init__(self):
        r = 0.0
        for prim, pose in self.parts:
            r = max(r, float(np.linalg.norm(pose.t)) + prim.bounding_radius)
        self.bounding_radius = r

    def intersect(self, origins, dirs):
        best = np.full(len(dirs), np.inf)
        for prim, pose in self.parts:
            inv = pose.inverse()
            o = inv.apply(origins)
            d = dirs @ inv.R.T
            t = prim.intersect(o, d)
            best = np.minimum(best, t)
        return best

    def normal(self, pts):
        # child with the smallest |sdf| at the surface point owns the normal
        best = np.full(len(pts), np.inf)
        normals = np.zeros_like(pts)
        for prim, pose in self.parts:
            inv = pose.inverse()
            local = inv.apply(pts)
            d = np.abs(prim.sdf(local))
            closer = d < best
            if np.any(closer):
                n_local = prim.normal(local[closer])
                normals[closer] = n_local @ pose.R.T
                best[closer] = d[closer]
        return normals

    def sdf(self, pts):
        best = np.full(len(pts), np.inf)
        for prim, pose in self.parts:
            local = pose.inverse().apply(pts)
            best = np.minimum(best, prim.sdf(local))
        return best


# ---------------------------------------------------------------------------
# Textures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Texture:
    """Solid 3D texture evaluated in object coordinates.

    kind: "checker" alternates two colors on a texel lattice, "noise" hashes
    each texel cell to a pseudo-random color, "uniform" is one flat color.
    """

    kind: str = "checker"
    texel: float = 0.02
    color_a: tuple[float, float, float] = (0.85, 0.75, 0.25)
    color_b: tuple[float, float, float] = (0.2, 0.25, 0.6)
    seed: int = 0

    def sample(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "uniform":
            return np.tile(np.array(self.color_a), (len(pts), 1))
        cells = np.floor(pts / self.texel).astype(np.int64)
        if self.kind == "checker":
            parity = (cells.sum(axis=-1)) % 2
            a = np.array(self.color_a)
            b = np.array(self.color_b)
            return np.where(parity[:, None] == 0, a, b)
        if self.kind == "noise":
            h = (cells[:, 0] * np.int64(73856093)
                 ^ cells[:, 1] * np.int64(19349663)
                 ^ cells[:, 2] * np.int64(83492791)
                 ^ np.int64(self.seed * 2654435761 + 0x9E3779B9))
            rgb = np.empty((len(pts), 3))
            for ch in range(3):
                h = h * np.int64(6364136223846793005) + np.int64(1442695040888963407)
                rgb[:, ch] = ((h >> np.int64(33)) & np.int64(0xFFFF)) / 65535.0
            return 0.15 + 0.7 * rgb
        raise ValueError(f"unknown texture kind {self.kind!r}")


# ---------------------------------------------------------------------------
# Trajectories and scene specification
# ---------------------------------------------------------------------------

@dataclass
class Turntable:
    """Parametric yaw trajectory with an optional end-of-sequence flip.

    The object spins about its own z axis (kept vertical in camera space),
    optionally about an axis offset from its centroid, then flips about a
    horizontal axis to expose the underside.
    """

    yaw_deg_per_frame: float = 3.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.55)
    tilt_deg: float = 15.0
    axis_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    flip_start: int | None = None
    flip_deg_per_frame: float = 6.0

    def pose(self, frame: int) -> RigidPose:
        base = compose(
            RigidPose.from_axis_angle([1, 0, 0], math.radians(90.0 + self.tilt_deg),
                                      t=np.array(self.center)),
            RigidPose.identity(),
        )
        if self.flip_start is not None and frame >= self.flip_start:
            yaw_frames = self.flip_start
            flip_angle = math.radians(self.flip_deg_per_frame * (frame - self.flip_start))
        else:
            yaw_frames = frame
            flip_angle = 0.0
        yaw = math.radians(self.yaw_deg_per_frame * yaw_frames)
        a = np.array(self.axis_offset)
        spin = RigidPose.from_axis_angle([0, 0, 1], yaw)
        spin = RigidPose(spin.quat, a - spin.R @ a)
        motion = spin
        if flip_angle != 0.0:
            motion = compose(RigidPose.from_axis_angle([1, 0, 0], flip_angle), motion)
        return compose(base, motion)


@dataclass
class SceneSpec:
    """Full description of a synthetic sequence."""

    primitive: Primitive
    texture: Texture
    camera: CameraIntrinsics
    n_frames: int
    trajectory: Turntable | list[RigidPose]
    name: str = "object"
    ambient: float = 0.35

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("frame count must be >= 2")

    def pose(self, frame: int) -> RigidPose:
        if isinstance(self.trajectory, Turntable):
            return self.trajectory.pose(frame)
        return self.trajectory[frame]


@dataclass(frozen=True)
class NoiseModel:
    """Imperfection model for the correspondence oracle."""

    pixel_sigma: float = 0.5
    outlier_fraction: float = 0.1
    depth_sigma: float = 0.001
    dropout_fraction: float = 0.0

    def __post_init__(self):
        if not (0 <= self.outlier_fraction < 1 and 0 <= self.dropout_fraction < 1):
            raise ValueError("fractions must lie in [0, 1)")
        if self.pixel_sigma < 0 or self.depth_sigma < 0:
            raise ValueError("sigmas must be non-negative")

    @staticmethod
    def none() -> "NoiseModel":
        return NoiseModel(0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_frame(spec: SceneSpec, pose: RigidPose):
    """Raycast one frame; returns (rgb, depth, mask) with exact geometry."""
    K = spec.camera
    uu, vv = np.meshgrid(np.arange(K.width), np.arange(K.height))
    dirs_cam = np.stack([
        (uu.ravel() - K.cx) / K.fx,
        (vv.ravel() - K.cy) / K.fy,
        np.ones(uu.size),
    ], axis=1)
    inv = pose.inverse()
    origins = np.broadcast_to(inv.t, dirs_cam.shape).copy()
    dirs_obj = dirs_cam @ inv.R.T
    t = spec.primitive.intersect(origins, dirs_obj)
    hit = np.isfinite(t)
    depth = np.zeros(uu.size)
    depth[hit] = t[hit]  # ray z-component is 1, so t equals camera depth
    rgb = np.zeros((uu.size, 3))
    if np.any(hit):
        pts_obj = origins[hit] + t[hit, None] * dirs_obj[hit]
        normals_obj = spec.primitive.normal(pts_obj)
        albedo = spec.texture.sample(pts_obj)
        view = dirs_cam[hit] / np.linalg.norm(dirs_cam[hit], axis=1, keepdims=True)
        normals_cam = normals_obj @ pose.R.T
        lambert = np.maximum(0.0, -np.einsum("ij,ij->i", normals_cam, view))
        shade = spec.ambient + (1.0 - spec.ambient) * lambert
        rgb[hit] = albedo * shade[:, None]
    H, W = K.height, K.width
    return (rgb.reshape(H, W, 3), depth.reshape(H, W), hit.reshape(H, W))


def render_sequence(spec: SceneSpec, seed: int = 0):
    """Render all frames of a spec into an in-memory dataset with GT poses.

    Raises:
        DegenerateTrajectory: if any pose leaves the object fully off-screen.
    """
    from .dataset import FrameRGBD, RGBDDataset

    frames = []
    poses = []
    for i in range(spec.n_frames):
        pose = spec.pose(i)
        rgb, depth, mask = render_frame(spec, pose)
        if not mask.any():
            raise DegenerateTrajectory(f"frame {i}: object outside the frustum")
        frames.append(FrameRGBD(rgb=rgb, depth=depth, mask=mask, index=i))
        poses.append(pose)
    return RGBDDataset(camera=spec.camera, frames=frames, gt_poses=poses,
                       name=spec.name, seed=seed)


# ---------------------------------------------------------------------------
# Correspondence oracle
# ---------------------------------------------------------------------------

DENSE_MATCHER_MODE = "dense-matcher-mode"
QUERY_TRACKER_MODE = "query-tracker-mode"


@dataclass
class CorrespondenceSet:
    """2D matches between a pair of frames.

    ``pix_b`` rows of invisible correspondences are NaN. ``depth_a`` and
    ``depth_b`` carry the exact transfer depths (meters) so the oracle can
    be validated independently of stored depth maps.
    """

    pix_a: np.ndarray
    pix_b: np.ndarray
    visible: np.ndarray
    source: str
    depth_a: np.ndarray
    depth_b: np.ndarray

    def __len__(self) -> int:
        return len(self.pix_a)


def visibility_rate(cs: CorrespondenceSet) -> float:
    """Fraction of correspondences still tracked as visible.

    Raises:
        EmptySet: for an empty correspondence set.
    """
    if len(cs) == 0:
        raise EmptySet("no correspondences")
    return float(np.count_nonzero(cs.visible)) / len(cs)


class CorrespondenceOracle:
    """Ground-truth tracker stand-in operating on a rendered dataset.

    In query-tracker mode the query set of a source frame is seeded once
    (at corner-response maxima) and reused across calls, so visibility
    rates are measured against a persistent set. Dense-matcher mode
    resamples fresh pixels for every frame pair.
    """

    def __init__(self, dataset, noise: NoiseModel | None = None, seed: int = 0,
                 max_queries: int = 200, dense_samples: int = 300):
        if dataset.gt_poses is None:
            raise ValueError("oracle needs ground-truth poses")
        self.dataset = dataset
        self.noise = noise if noise is not None else NoiseModel.none()
        self.seed = seed
        self.max_queries = max_queries
        self.dense_samples = dense_samples
        self._queries: dict[int, np.ndarray] = {}

    # -- query management ---------------------------------------------------

    def queries_for(self, frame_idx: int) -> np.ndarray:
        """Persistent integer-pixel query set for a frame (seeded on first use)."""
        if frame_idx not in self._queries:
            from .complexity import detect_corners

            frame = self.dataset.frames[frame_idx]
            corners = detect_corners(frame)
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, frame_idx, 0xC0]))
            if len(corners) > self.max_queries:
                corners = corners[rng.permutation(len(corners))[:self.max_queries]]
            n_fill = max(0, 30 - len(corners))
            if n_fill:
                vv, uu = np.nonzero(frame.mask)
                pick = rng.choice(len(uu), size=min(n_fill, len(uu)), replace=False)
                fill = np.stack([uu[pick], vv[pick]], axis=1)
                corners = fill if len(corners) == 0 else np.vstack([corners, fill])
            self._queries[frame_idx] = np.asarray(corners, dtype=np.float64)
        return self._queries[frame_idx]

    def _dense_pixels(self, frame_idx: int, pair_rng: np.random.Generator) -> np.ndarray:
        frame = self.dataset.frames[frame_idx]
        vv, uu = np.nonzero(frame.mask)
        if len(uu) == 0:
            raise EmptyMask(f"frame {frame_idx} has an empty mask")
        n = min(self.dense_samples, len(uu))
        pick = pair_rng.choice(len(uu), size=n, replace=False)
        return np.stack([uu[pick], vv[pick]], axis=1).astype(np.float64)

    # -- transfer -----------------------------------------------------------

    def track(self, idx_a: int, idx_b: int,
              mode: str = QUERY_TRACKER_MODE) -> CorrespondenceSet:
        """Map pixels of frame A into frame B through the known geometry.

        Raises:
            EmptyMask: when frame A has no masked pixels to sample.
        """
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, idx_a, idx_b, 0xAB]))
        if mode == QUERY_TRACKER_MODE:
            pix_a = self.queries_for(idx_a).copy()
        elif mode == DENSE_MATCHER_MODE:
            pix_a = self._dense_pixels(idx_a, rng)
        else:
            raise ValueError(f"unknown tracking mode {mode!r}")
        if len(pix_a) == 0:
            raise EmptyMask(f"frame {idx_a} produced no query pixels")

        frame_a = self.dataset.frames[idx_a]
        frame_b = self.dataset.frames[idx_b]
        K = self.dataset.camera
        pose_a = self.dataset.gt_poses[idx_a]
        pose_b = self.dataset.gt_poses[idx_b]

        ia = pix_a.round().astype(int)
        depth_a = frame_a.depth[ia[:, 1], ia[:, 0]]
        z_a = depth_a.copy()
        if self.noise.depth_sigma > 0:
            z_a = z_a + rng.normal(0.0, self.noise.depth_sigma, size=len(z_a))
        x = (pix_a[:, 0] - K.cx) / K.fx * z_a
        y = (pix_a[:, 1] - K.cy) / K.fy * z_a
        pts_a = np.stack([x, y, z_a], axis=1)
        rel = compose(pose_b, pose_a.inverse())
        pts_b = rel.apply(pts_a)
        uv_b, z_b = project_points(K, pts_b)

        visible = (depth_a > 0) & np.isfinite(uv_b).all(axis=1)
        ub = np.clip(np.round(uv_b[:, 0]), 0, K.width - 1).astype(int)
        vb = np.clip(np.round(uv_b[:, 1]), 0, K.height - 1).astype(int)
        in_bounds = ((uv_b[:, 0] >= 0) & (uv_b[:, 0] <= K.width - 1)
                     & (uv_b[:, 1] >= 0) & (uv_b[:, 1] <= K.height - 1))
        visible &= in_bounds
        rendered = frame_b.depth[vb, ub]
        occluded = np.abs(rendered - z_b) > _OCCLUSION_TOL
        visible &= ~occluded & frame_b.mask[vb, ub]

        if self.noise.dropout_fraction > 0:
            drop = rng.random(len(visible)) < self.noise.dropout_fraction
            visible &= ~drop

        vis_idx = np.nonzero(visible)[0]
        if self.noise.outlier_fraction > 0 and len(vis_idx):
            n_out = int(round(self.noise.outlier_fraction * len(vis_idx)))
            out_idx = rng.choice(vis_idx, size=n_out, replace=False)
            bvv, buu = np.nonzero(frame_b.mask)
            pick = rng.choice(len(buu), size=n_out, replace=True)
            uv_b[out_idx, 0] = buu[pick]
            uv_b[out_idx, 1] = bvv[pick]
        if self.noise.pixel_sigma > 0 and len(vis_idx):
            jitter = rng.normal(0.0, self.noise.pixel_sigma, size=(len(vis_idx), 2))
            uv_b[vis_idx] += jitter
            uv_b[vis_idx, 0] = np.clip(uv_b[vis_idx, 0], 0, K.width - 1)
            uv_b[vis_idx, 1] = np.clip(uv_b[vis_idx, 1], 0, K.height - 1)

        uv_b[~visible] = np.nan
        return CorrespondenceSet(
            pix_a=pix_a, pix_b=uv_b, visible=visible,
            source=mode, depth_a=depth_a, depth_b=z_b)


def track_correspondences(dataset, idx_a: int, idx_b: int,
                          noise: NoiseModel | None = None,
                          mode: str = QUERY_TRACKER_MODE,
                          seed: int = 0) -> CorrespondenceSet:
    """One-shot oracle call for callers that do not need query persistence."""
    return CorrespondenceOracle(dataset, noise=noise, seed=seed).track(idx_a, idx_b, mode)
