"""CPU Gaussian-splat scene: rendering, losses, fitting, render-and-compare pose refinement.

The scene is a set of anisotropic 3D Gaussians with constant per-Gaussian RGB.
Rendering projects each Gaussian to an image-plane ellipse (EWA approximation),
bins it into 16x16 pixel tiles, sorts front to back within each tile, and
alpha-composites color and the z-component of the means into per-pixel color
and depth. Everything runs through torch so that the same forward pass yields
exact reverse-mode gradients for both scene parameters (fitting) and a 6-DoF
twist on the camera pose (refinement).

Tiles are processed in a fixed order and each tile writes a disjoint pixel
block, so outputs are reproducible regardless of torch's internal thread count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import FrameRGBD
from .errors import DimensionMismatch, EmptyScene, NoKeyframes, DatasetError
from .geom import CameraIntrinsics, RigidPose

TILE = 16
NEAR_PLANE = 0.01
COV2D_REG = 0.3          # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.99
T_STOP = 1e-4            # compositing stops once transmittance drops below this
ALPHA_SUPPORT = 0.05     # rendered-alpha level that counts as "covered" for losses
DEPTH_SUPPORT = 0.5      # min accumulated alpha for a rendered depth to enter the loss
BIN_SIGMA = 3.5          # tile binning radius in units of projected sigma

DEFAULT_WEIGHTS = {"lambda_color": 0.98, "lambda_depth": 0.02, "lambda_reg": 0.01}
SSIM_MIX = 0.2           # SSIM share inside the color loss


@dataclass
class Gaussian3D:
    """One splat: position, per-axis scale, orientation, opacity, RGB color."""

    mean: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.quat = np.asarray(self.quat, dtype=float).reshape(4)
        self.quat = self.quat / np.linalg.norm(self.quat)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("gaussian scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("gaussian opacity must lie in (0, 1)")


class SplatScene:
    """A collection of Gaussians stored as flat arrays plus a creation-frame tag."""

    def __init__(self, means, scales, quats, opacities, colors, created_at=None):
        self.means = np.asarray(means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.asarray(scales, dtype=float).reshape(n, 3)
        q = np.asarray(quats, dtype=float).reshape(n, 4)
        self.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
        self.opacities = np.asarray(opacities, dtype=float).reshape(n)
        self.colors = np.asarray(colors, dtype=float).reshape(n, 3)
        if created_at is None:
            created_at = np.zeros(n, dtype=int)
        self.created_at = np.asarray(created_at, dtype=int).reshape(n)

    @staticmethod
    def from_gaussians(gaussians: list, created_at=None) -> "SplatScene":
        if len(gaussians) == 0:
            return SplatScene.empty()
        return SplatScene(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.quat for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            created_at,
        )

    @staticmethod
    def empty() -> "SplatScene":
        return SplatScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                          np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.means)

    @property
    def gaussians(self) -> list:
        return [Gaussian3D(self.means[i], self.scales[i], self.quats[i],
                           float(self.opacities[i]), self.colors[i])
                for i in range(len(self))]

    def subset(self, keep: np.ndarray) -> "SplatScene":
        return SplatScene(self.means[keep], self.scales[keep], self.quats[keep],
                          self.opacities[keep], self.colors[keep], self.created_at[keep])

    def merged(self, other: "SplatScene") -> "SplatScene":
        return SplatScene(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.quats, other.quats]),
            np.concatenate([self.opacities, other.opacities]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.created_at, other.created_at]),
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of the means padded by 3 sigma per splat."""
        if len(self) == 0:
            raise EmptyScene("cannot bound an empty scene")
        r = 3.0 * self.scales.max(axis=1, keepdims=True)
        return (self.means - r).min(axis=0), (self.means + r).max(axis=0)


@dataclass
class RenderOutput:
    """Rendered color/depth plus per-pixel accumulated alpha and splat counts."""

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    count: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    color: float
    depth: float
    reg: float


def transform_scene(scene: SplatScene, pose: RigidPose) -> SplatScene:
    """Move every splat by a rigid transform (means rotated+translated, quats rotated)."""
    from .geom import quat_multiply

    quats = np.stack([quat_multiply(pose.quat, q) for q in scene.quats]) \
        if len(scene) else scene.quats
    return SplatScene(pose.apply(scene.means) if len(scene) else scene.means,
                      scene.scales, quats, scene.opacities, scene.colors,
                      scene.created_at)


# ---------------------------------------------------------------------------
# torch kernels
# ---------------------------------------------------------------------------

def _quats_to_rotmats(q: torch.Tensor) -> torch.Tensor:
    """Batched unit-quaternion (w,x,y,z) to rotation matrices, (N,4) -> (N,3,3)."""
    q = q / q.norm(dim=1, keepdim=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=1)
    return R.reshape(-1, 3, 3)


def _exp_se3(xi: torch.Tensor) -> torch.Tensor:
    """Differentiable SE(3) exponential, twist (wx,wy,wz,vx,vy,vz) -> 4x4 matrix."""
    w, v = xi[:3], xi[3:]
    t2 = (w * w).sum()
    t = torch.sqrt(torch.clamp(t2, min=1e-24))
    small = t2 < 1e-12
    # series fallbacks keep the non-selected branch NaN-free at theta ~ 0
    A = torch.where(small, 1 - t2 / 6, torch.sin(t) / t)
    B = torch.where(small, 0.5 - t2 / 24, (1 - torch.cos(t)) / t2.clamp(min=1e-24))
    C = torch.where(small, 1 / 6 - t2 / 120, (1 - A) / t2.clamp(min=1e-24))
    zero = torch.zeros((), dtype=xi.dtype)
    K = torch.stack([
        torch.stack([zero, -w[2], w[1]]),
        torch.stack([w[2], zero, -w[0]]),
        torch.stack([-w[1], w[0], zero]),
    ])
    eye = torch.eye(3, dtype=xi.dtype)
    R = eye + A * K + B * (K @ K)
    V = eye + B * K + C * (K @ K)
    T = torch.eye(4, dtype=xi.dtype)
    T = torch.cat([torch.cat([R, (V @ v).reshape(3, 1)], dim=1),
                   torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=xi.dtype)], dim=0)
    return T


def _project_splats(means, scales, quats, pose_mat, K: CameraIntrinsics):
    """Project all splats; returns 2D means, 2D covariance entries, view-space z.

    Covariance uses the local-affine (EWA) approximation
    Sigma2D = J W Sigma W^T J^T with J the pinhole Jacobian at the mean,
    then +COV2D_REG on the diagonal.
    """
    R = pose_mat[:3, :3]
    t = pose_mat[:3, 3]
    p = means @ R.T + t                       # view space (N,3)
    z = p[:, 2]
    Rg = _quats_to_rotmats(quats)             # (N,3,3)
    S2 = scales ** 2
    cov = Rg @ (S2.unsqueeze(-1) * Rg.transpose(1, 2))   # R diag(s^2) R^T
    covw = R @ cov @ R.T                      # rotated into view space
    zc = z.clamp(min=NEAR_PLANE)
    fx, fy = K.fx, K.fy
    invz = 1.0 / zc
    invz2 = invz * invz
    # J rows: [fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]
    j00 = fx * invz
    j02 = -fx * p[:, 0] * invz2
    j11 = fy * invz
    j12 = -fy * p[:, 1] * invz2
    c00, c01, c02 = covw[:, 0, 0], covw[:, 0, 1], covw[:, 0, 2]
    c11, c12, c22 = covw[:, 1, 1], covw[:, 1, 2], covw[:, 2, 2]
    a = j00 * (j00 * c00 + j02 * c02) + j02 * (j00 * c02 + j02 * c22) + COV2D_REG
    b = j00 * (j11 * c01 + j12 * c02) + j02 * (j11 * c12 + j12 * c22)
    c = j11 * (j11 * c11 + j12 * c12) + j12 * (j11 * c12 + j12 * c22) + COV2D_REG
    u = fx * p[:, 0] * invz + K.cx
    v = fy * p[:, 1] * invz + K.cy
    return torch.stack([u, v], dim=1), (a, b, c), z


def _render_torch(means, scales, quats, opacities, colors, pose_mat,
                  K: CameraIntrinsics, want_count: bool = False,
                  bin_sigma: float = BIN_SIGMA):
    """Differentiable tile rasterizer. Returns (color, depth, alpha, count).

    `bin_sigma` sets where the tile binning trims each splat's support;
    widening it shrinks the trim discontinuity (used by gradient checks).
    """
    H, W = K.height, K.width
    dtype = means.dtype
    mean2d, (ca, cb, cc), z = _project_splats(means, scales, quats, pose_mat, K)
    visible = z > NEAR_PLANE
    color = torch.zeros((H, W, 3), dtype=dtype)
    depth = torch.zeros((H, W), dtype=dtype)
    alpha_acc = torch.zeros((H, W), dtype=dtype)
    count = torch.zeros((H, W), dtype=torch.int64)
    if not bool(visible.any()):
        return color, depth, alpha_acc, count

    # binning and sorting are control flow: work on detached values
    with torch.no_grad():
        mu = mean2d.detach().numpy()
        a_d = ca.detach().numpy()
        b_d = cb.detach().numpy()
        c_d = cc.detach().numpy()
        zs = z.detach().numpy()
        vis = visible.numpy()
        # largest eigenvalue of [[a,b],[b,c]] bounds the support radius
        half = 0.5 * (a_d + c_d)
        lam = half + np.sqrt(np.maximum(half * half - (a_d * c_d - b_d * b_d), 0.0))
        rad = bin_sigma * np.sqrt(np.maximum(lam, 0.0)) + 1.0

    det = ca * cc - cb * cb
    inv_a = cc / det
    inv_b = -cb / det
    inv_c = ca / det

    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    for ty in range(nty):
        y0, y1 = ty * TILE, min((ty + 1) * TILE, H)
        for tx in range(ntx):
            x0, x1 = tx * TILE, min((tx + 1) * TILE, W)
            hit = vis & (mu[:, 0] + rad >= x0) & (mu[:, 0] - rad <= x1 - 1) \
                      & (mu[:, 1] + rad >= y0) & (mu[:, 1] - rad <= y1 - 1)
            idx = np.nonzero(hit)[0]
            if idx.size == 0:
                continue
            idx = idx[np.argsort(zs[idx], kind="stable")]   # front to back
            sel = torch.from_numpy(idx)
            ys = torch.arange(y0, y1, dtype=dtype)
            xs = torch.arange(x0, x1, dtype=dtype)
            py, px = torch.meshgrid(ys, xs, indexing="ij")
            dx = px.reshape(-1, 1) - mean2d[sel, 0].unsqueeze(0)   # (P,S)
            dy = py.reshape(-1, 1) - mean2d[sel, 1].unsqueeze(0)
            power = -0.5 * (inv_a[sel] * dx * dx + 2 * inv_b[sel] * dx * dy
                            + inv_c[sel] * dy * dy)
            alpha = torch.clamp(opacities[sel] * torch.exp(power), max=ALPHA_MAX)
            one_minus = 1.0 - alpha
            T = torch.cumprod(one_minus, dim=1)
            T = torch.cat([torch.ones((T.shape[0], 1), dtype=dtype), T[:, :-1]], dim=1)
            w = alpha * T * (T >= T_STOP).to(dtype)
            tile_color = w.unsqueeze(-1) * colors[sel].unsqueeze(0)
            ph, pw = y1 - y0, x1 - x0
            color[y0:y1, x0:x1] = tile_color.sum(dim=1).reshape(ph, pw, 3)
            depth[y0:y1, x0:x1] = (w * z[sel]).sum(dim=1).reshape(ph, pw)
            alpha_acc[y0:y1, x0:x1] = w.sum(dim=1).reshape(ph, pw)
            if want_count:
                count[y0:y1, x0:x1] = (w.detach() > 1e-4).sum(dim=1).reshape(ph, pw)
    return color, depth, alpha_acc, count


def _scene_tensors(scene: SplatScene, dtype=torch.float64):
    return (torch.from_numpy(scene.means).to(dtype),
            torch.from_numpy(scene.scales).to(dtype),
            torch.from_numpy(scene.quats).to(dtype),
            torch.from_numpy(scene.opacities).to(dtype),
            torch.from_numpy(scene.colors).to(dtype))


# ---------------------------------------------------------------------------
# public rendering API
# ---------------------------------------------------------------------------

def project_gaussian(g: Gaussian3D, pose: RigidPose, K: CameraIntrinsics):
    """Project one Gaussian; returns (mean2d, cov2d, z) or None when culled."""
    means = torch.from_numpy(g.mean).reshape(1, 3)
    scales = torch.from_numpy(g.scale).reshape(1, 3)
    quats = torch.from_numpy(g.quat).reshape(1, 4)
    pm = torch.from_numpy(pose.matrix())
    with torch.no_grad():
        mean2d, (a, b, c), z = _project_splats(means, scales, quats, pm, K)
    zv = float(z[0])
    if zv <= NEAR_PLANE:
        return None
    cov = np.array([[float(a[0]), float(b[0])], [float(b[0]), float(c[0])]])
    return mean2d[0].numpy(), cov, zv


def render(scene: SplatScene, pose: RigidPose, K: CameraIntrinsics,
           bin_sigma: float = BIN_SIGMA) -> RenderOutput:
    """Render the scene under an object-to-camera pose; front-to-back compositing."""
    if len(scene) == 0:
        raise EmptyScene("render requires a non-empty scene")
    tensors = _scene_tensors(scene)
    pm = torch.from_numpy(pose.matrix())
    with torch.no_grad():
        color, depth, alpha, count = _render_torch(*tensors, pm, K, want_count=True,
                                                   bin_sigma=bin_sigma)
    return RenderOutput(color=color.numpy(), depth=depth.numpy(),
                        alpha=alpha.numpy(), count=count.numpy())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x * x) / (2 * sigma * sigma))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).reshape(1, 1, size, size)


def _ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM of two (H,W,3) images in [0,1]; 11x11 Gaussian window."""
    win = _gaussian_window(dtype=a.dtype).repeat(3, 1, 1, 1)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    pad = 5
    conv = lambda img: torch.nn.functional.conv2d(img, win, padding=pad, groups=3)
    mx, my = conv(x), conv(y)
    sxx = conv(x * x) - mx * mx
    syy = conv(y * y) - my * my
    sxy = conv(x * y) - mx * my
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return (num / den).squeeze(0).mean(dim=0)   # channel-mean, (H,W)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two (H,W,3) images in [0,1]."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    with torch.no_grad():
        m = _ssim_map(torch.from_numpy(np.ascontiguousarray(a, dtype=float)),
                      torch.from_numpy(np.ascontiguousarray(b, dtype=float)))
    return float(m.mean())


def _losses_torch(r_color, r_depth, r_alpha, scales, frame_rgb, frame_depth,
                  frame_mask, weights, regions=None):
    """Loss stack on torch tensors; returns (total, color, depth, reg) scalars.

    `regions` optionally pins the (color, depth) pixel selections; by default
    they follow the rendered alpha, which makes the loss piecewise smooth.
    """
    if regions is None:
        support = r_alpha.detach() > ALPHA_SUPPORT
        region = frame_mask | support
        dvalid = (frame_depth > 0) & (r_alpha.detach() > DEPTH_SUPPORT)
    else:
        region, dvalid = regions
    zero = torch.zeros((), dtype=r_color.dtype)
    if bool(region.any()):
        l1 = (r_color - frame_rgb).abs().mean(dim=2)[region].mean()
        smap = _ssim_map(r_color, frame_rgb)
        s = smap[region].mean()
        l_color = (1.0 - SSIM_MIX) * l1 + SSIM_MIX * (1.0 - s)
    else:
        l_color = zero
    l_depth = (r_depth - frame_depth).abs()[dvalid].mean() if bool(dvalid.any()) else zero
    if scales is not None and scales.shape[0] > 0:
        l_reg = (scales - scales.mean(dim=1, keepdim=True)).abs().sum(dim=1).mean()
    else:
        l_reg = zero
    total = (weights["lambda_color"] * l_color + weights["lambda_depth"] * l_depth
             + weights["lambda_reg"] * l_reg)
    return total, l_color, l_depth, l_reg


def losses(render_out: RenderOutput, frame: FrameRGBD, scene: SplatScene | None = None,
           **weights) -> LossBreakdown:
    """Photometric + depth + isotropy losses of a render against an observed frame.

    Color: (1-0.2)*L1 + 0.2*(1-SSIM) over mask-union-coverage pixels.
    Depth: mean absolute difference where observed depth is valid and the
    render actually covers the pixel. Reg: per-splat scale anisotropy.
    """
    if render_out.color.shape != frame.rgb.shape:
        raise DimensionMismatch(
            f"render {render_out.color.shape} vs frame {frame.rgb.shape}")
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights)
    scales_t = torch.from_numpy(scene.scales).to(torch.float64) \
        if scene is not None and len(scene) else None
    with torch.no_grad():
        total, lc, ld, lr = _losses_torch(
            torch.from_numpy(np.ascontiguousarray(render_out.color, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(render_out.depth, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(render_out.alpha, dtype=float)),
            scales_t,
            torch.from_numpy(np.ascontiguousarray(frame.rgb, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(frame.depth, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(frame.mask)),
            w)
    return LossBreakdown(float(total), float(lc), float(ld), float(lr))


# ---------------------------------------------------------------------------
# seeding and fitting
# ---------------------------------------------------------------------------

def seed_scene(frame: FrameRGBD, pose: RigidPose, K: CameraIntrinsics,
               stride: int = 3, opacity: float = 0.7, frame_index: int = 0,
               keep: np.ndarray | None = None, max_splats: int = 6000) -> SplatScene:
    """Backproject masked depth into object space, one splat per stride-th pixel.

    Initial per-splat scale is the local point spacing (stride * z / fx),
    orientation is identity, color is the observed pixel color. `keep`
    optionally restricts seeding to a pixel subset (used when extending).
    """
    vv, uu = np.nonzero(frame.mask)
    sel = (vv % stride == 0) & (uu % stride == 0)
    if keep is not None:
        sel &= keep[vv, uu]
    vv, uu = vv[sel], uu[sel]
    z = frame.depth[vv, uu]
    ok = z > 0
    vv, uu, z = vv[ok], uu[ok], z[ok]
    if len(z) > max_splats:
        pick = np.round(np.linspace(0, len(z) - 1, max_splats)).astype(int)
        vv, uu, z = vv[pick], uu[pick], z[pick]
    if len(z) == 0:
        return SplatScene.empty()
    cam = np.stack([(uu - K.cx) * z / K.fx, (vv - K.cy) * z / K.fy, z], axis=1)
    obj = pose.inverse().apply(cam)
    spacing = stride * z / K.fx
    scales = np.repeat(spacing[:, None], 3, axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(z), 1))
    colors = np.clip(frame.rgb[vv, uu], 0.0, 1.0)
    return SplatScene(obj, scales, quats, np.full(len(z), opacity), colors,
                      np.full(len(z), frame_index, dtype=int))


def extend_scene(scene: SplatScene, frame: FrameRGBD, pose: RigidPose,
                 K: CameraIntrinsics, stride: int = 3,
                 alpha_threshold: float = 0.3, frame_index: int = 0,
                 max_splats: int = 6000) -> SplatScene:
    """Add splats for masked pixels the current scene leaves uncovered."""
    if len(scene) == 0:
        return seed_scene(frame, pose, K, stride, frame_index=frame_index,
                          max_splats=max_splats)
    out = render(scene, pose, K)
    uncovered = out.alpha < alpha_threshold
    fresh = seed_scene(frame, pose, K, stride, frame_index=frame_index,
                       keep=uncovered, max_splats=max_splats)
    return scene.merged(fresh)


def _raw_params(scene: SplatScene, dtype=torch.float64):
    """Scene arrays as leaf tensors: means, log-scale, quat, logit-opacity, color."""
    eps = 1e-5
    means = torch.tensor(scene.means, dtype=dtype, requires_grad=True)
    log_s = torch.tensor(np.log(scene.scales), dtype=dtype, requires_grad=True)
    quats = torch.tensor(scene.quats, dtype=dtype, requires_grad=True)
    logit = torch.tensor(np.log(scene.opacities / (1 - scene.opacities)),
                         dtype=dtype, requires_grad=True)
    colors = torch.tensor(np.clip(scene.colors, eps, 1 - eps), dtype=dtype,
                          requires_grad=True)
    return means, log_s, quats, logit, colors


def optimize_scene(scene: SplatScene | None, keyframes, K: CameraIntrinsics,
                   iterations: int = 300, seed_stride: int = 3,
                   lr_means: float = 5e-4, lr_scales: float = 5e-3,
                   lr_quats: float = 1e-3, lr_opacity: float = 5e-2,
                   lr_colors: float = 2e-2, prune_every: int = 100,
                   prune_below: float = 0.05, **weights) -> SplatScene:
    """Fit splats to keyframes by Adam on the joint loss, keyframes round-robin.

    `keyframes` is a sequence of (FrameRGBD, RigidPose) pairs. A missing or
    empty input scene is seeded from the first keyframe. Splats whose opacity
    falls below `prune_below` are dropped every `prune_every` iterations.
    """
    keyframes = list(keyframes)
    if len(keyframes) == 0:
        raise NoKeyframes("scene fitting needs at least one keyframe")
    if scene is None or len(scene) == 0:
        f0, p0 = keyframes[0]
        scene = seed_scene(f0, p0, K, stride=seed_stride, frame_index=f0.index)
    if len(scene) == 0:
        raise EmptyScene("seeding produced no splats (empty mask?)")
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights)
    created = scene.created_at.copy()

    frames_t = []
    for f, p in keyframes:
        frames_t.append((
            torch.from_numpy(np.ascontiguousarray(f.rgb, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(f.depth, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(f.mask)),
            torch.from_numpy(p.matrix()),
        ))

    params = _raw_params(scene)
    if iterations == 0:
        return scene

    def make_opt(ps):
        return torch.optim.Adam([
            {"params": [ps[0]], "lr": lr_means},
            {"params": [ps[1]], "lr": lr_scales},
            {"params": [ps[2]], "lr": lr_quats},
            {"params": [ps[3]], "lr": lr_opacity},
            {"params": [ps[4]], "lr": lr_colors},
        ])

    opt = make_opt(params)
    for it in range(iterations):
        rgb_t, dep_t, mask_t, pm = frames_t[it % len(frames_t)]
        means, log_s, quats, logit, colors = params
        scales = torch.exp(log_s)
        opac = torch.sigmoid(logit)
        col = torch.clamp(colors, 0.0, 1.0)
        rc, rd, ra, _ = _render_torch(means, scales, quats, opac, col,
                                      pm, K)
        total, _, _, _ = _losses_torch(rc, rd, ra, scales, rgb_t, dep_t, mask_t, w)
        opt.zero_grad()
        total.backward()
        opt.step()
        if prune_every and (it + 1) % prune_every == 0 and (it + 1) < iterations:
            with torch.no_grad():
                alive = (torch.sigmoid(params[3]) >= prune_below).numpy()
            if alive.sum() < len(alive) and alive.any():
                means, log_s, quats, logit, colors = params
                scene_now = SplatScene(
                    means.detach().numpy(), np.exp(log_s.detach().numpy()),
                    quats.detach().numpy(),
                    torch.sigmoid(logit).detach().numpy(),
                    np.clip(colors.detach().numpy(), 0, 1), created)
                scene_now = scene_now.subset(alive)
                created = scene_now.created_at
                params = _raw_params(scene_now)
                opt = make_opt(params)

    means, log_s, quats, logit, colors = params
    out = SplatScene(means.detach().numpy(), np.exp(log_s.detach().numpy()),
                     quats.detach().numpy(), torch.sigmoid(logit).detach().numpy(),
                     np.clip(colors.detach().numpy(), 0.0, 1.0), created)
    if prune_every:
        alive = out.opacities >= prune_below
        if alive.any():
            out = out.subset(alive)
    return out


# ---------------------------------------------------------------------------
# pose refinement
# ---------------------------------------------------------------------------

def loss_regions(scene: SplatScene, frame: FrameRGBD, pose: RigidPose,
                 K: CameraIntrinsics):
    """Freeze the loss pixel selections at one pose (for gradient verification)."""
    out = render(scene, pose, K)
    region = torch.from_numpy(frame.mask | (out.alpha > ALPHA_SUPPORT))
    dvalid = torch.from_numpy((frame.depth > 0) & (out.alpha > DEPTH_SUPPORT))
    return region, dvalid


def loss_of_pose(scene: SplatScene, frame: FrameRGBD, pose: RigidPose,
                 K: CameraIntrinsics, regions=None, bin_sigma: float = BIN_SIGMA,
                 **weights) -> float:
    """Joint loss of rendering the scene at a pose against a frame (no reg term)."""
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights)
    out = render(scene, pose, K, bin_sigma=bin_sigma)
    with torch.no_grad():
        total, _, _, _ = _losses_torch(
            torch.from_numpy(out.color), torch.from_numpy(out.depth),
            torch.from_numpy(out.alpha), None,
            torch.from_numpy(np.ascontiguousarray(frame.rgb, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(frame.depth, dtype=float)),
            torch.from_numpy(np.ascontiguousarray(frame.mask)), w, regions)
    return float(total)


def refine_pose(scene: SplatScene, frame: FrameRGBD, init: RigidPose,
                K: CameraIntrinsics, iterations: int = 100, lr: float = 2e-3,
                **weights) -> RigidPose:
    """Render-and-compare: descend the image losses over a 6-DoF twist on init.

    The scene stays frozen; the pose is parameterized as init * exp(xi) and
    xi follows Adam steps on gradients taken analytically through projection
    and compositing. Returns the best-loss pose seen; if no iterate improves
    on the initial loss the initial pose is returned unchanged.
    """
    if len(scene) == 0:
        raise EmptyScene("refinement requires a fitted scene")
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights)
    dtype = torch.float64
    tensors = _scene_tensors(scene, dtype)
    init_mat = torch.from_numpy(init.matrix()).to(dtype)
    rgb_t = torch.from_numpy(np.ascontiguousarray(frame.rgb, dtype=float))
    dep_t = torch.from_numpy(np.ascontiguousarray(frame.depth, dtype=float))
    mask_t = torch.from_numpy(np.ascontiguousarray(frame.mask))

    xi = torch.zeros(6, dtype=dtype, requires_grad=True)
    opt = torch.optim.Adam([xi], lr=lr)
    best_loss = np.inf
    best_xi = np.zeros(6)
    for _ in range(iterations):
        pm = init_mat @ _exp_se3(xi)
        rc, rd, ra, _ = _render_torch(*tensors, pm, K)
        total, _, _, _ = _losses_torch(rc, rd, ra, None, rgb_t, dep_t, mask_t, w)
        val = float(total)
        if val < best_loss:
            best_loss = val
            best_xi = xi.detach().numpy().copy()
        opt.zero_grad()
        total.backward()
        opt.step()
    if not np.any(best_xi):
        return init
    from .geom import apply_twist
    return apply_twist(init, best_xi)


def twist_gradient(scene: SplatScene, frame: FrameRGBD, pose: RigidPose,
                   K: CameraIntrinsics, xi: np.ndarray | None = None,
                   regions=None, bin_sigma: float = BIN_SIGMA,
                   **weights) -> np.ndarray:
    """Analytic gradient of the joint loss w.r.t. the twist at pose * exp(xi)."""
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights)
    dtype = torch.float64
    tensors = _scene_tensors(scene, dtype)
    init_mat = torch.from_numpy(pose.matrix()).to(dtype)
    xi_t = torch.tensor(np.zeros(6) if xi is None else np.asarray(xi, dtype=float),
                        dtype=dtype, requires_grad=True)
    pm = init_mat @ _exp_se3(xi_t)
    rc, rd, ra, _ = _render_torch(*tensors, pm, K, bin_sigma=bin_sigma)
    total, _, _, _ = _losses_torch(
        rc, rd, ra, None,
        torch.from_numpy(np.ascontiguousarray(frame.rgb, dtype=float)),
        torch.from_numpy(np.ascontiguousarray(frame.depth, dtype=float)),
        torch.from_numpy(np.ascontiguousarray(frame.mask)), w, regions)
    total.backward()
    return xi_t.grad.numpy().copy()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_SPLAT_HEADER = struct.Struct("<I")
_SPLAT_RECORD = struct.Struct("<14f")


def save_splats(scene: SplatScene, path) -> None:
    """Write the documented binary format: uint32 count, then per splat
    14 little-endian float32: mean(3), scale(3), quat(4), opacity, rgb(3)."""
    with open(path, "wb") as fh:
        fh.write(_SPLAT_HEADER.pack(len(scene)))
        for i in range(len(scene)):
            fh.write(_SPLAT_RECORD.pack(
                *scene.means[i], *scene.scales[i], *scene.quats[i],
                float(scene.opacities[i]), *scene.colors[i]))


def load_splats(path) -> SplatScene:
    """Read the binary splat format written by save_splats."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _SPLAT_HEADER.size:
        raise DatasetError(f"splat file too short: {path}")
    (n,) = _SPLAT_HEADER.unpack_from(raw, 0)
    expect = _SPLAT_HEADER.size + n * _SPLAT_RECORD.size
    if len(raw) != expect:
        raise DatasetError(f"splat file {path}: expected {expect} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SPLAT_HEADER.size).reshape(n, 14)
    data = data.astype(float)
    if n and (np.any(data[:, 3:6] <= 0) or np.any(data[:, 10] <= 0)
              or np.any(data[:, 10] >= 1)):
        raise DatasetError(f"splat file {path}: invalid scales or opacities")
    return SplatScene(data[:, 0:3], data[:, 3:6], data[:, 6:10], data[:, 10],
                      data[:, 11:14])
