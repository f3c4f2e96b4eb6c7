"""Appearance and geometric complexity scores used to gate the pipeline.

Appearance complexity is keypoint density over the object mask (a corner
detector stands in for any external keypoint source). Geometric complexity
is the mean per-point curvature, where curvature is the smallest-to-total
eigenvalue ratio of the local covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .dataset import FrameRGBD
from .errors import EmptyMask, TooFewPoints
from .geom import PointCloud

DEFAULT_APPEARANCE_THRESHOLD = 1.0   # keypoints per 1000 masked pixels
DEFAULT_GEOMETRY_THRESHOLD = 0.01    # mean curvature
DEFAULT_CURVATURE_RADIUS = 0.01      # meters
DEFAULT_CURVATURE_NEIGHBORS = 30

_CORNER_REL_THRESHOLD = 0.05
_CORNER_ABS_FLOOR = 1e-4


@dataclass(frozen=True)
class ComplexityScores:
    """Joint appearance + geometry summary for one frame."""

    appearance_density: float
    low_texture: bool
    geometric_complexity: float
    low_geometry: bool


def detect_corners(frame: FrameRGBD, rel_threshold: float = _CORNER_REL_THRESHOLD,
                   erode_mask: int = 2) -> np.ndarray:
    """Structure-tensor corner maxima inside the (eroded) object mask.

    Returns an (N, 2) integer array of (u, v) pixels, strongest first.
    The mask is eroded so silhouette gradients do not register as texture.
    """
    gray = frame.rgb.mean(axis=2) if frame.rgb.ndim == 3 else frame.rgb
    gx = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    # windowed second-moment matrix; min eigenvalue is the corner response
    sxx = ndimage.gaussian_filter(gx * gx, sigma=1.5, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma=1.5, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma=1.5, mode="nearest")
    trace = sxx + syy
    root = np.sqrt(np.maximum((sxx - syy) ** 2 + 4.0 * sxy**2, 0.0))
    response = 0.5 * (trace - root)

    mask = frame.mask
    if erode_mask > 0:
        mask = ndimage.binary_erosion(mask, iterations=erode_mask)
    response = np.where(mask, response, 0.0)
    peak = response.max()
    if peak <= _CORNER_ABS_FLOOR:
        return np.zeros((0, 2), dtype=int)
    local_max = response == ndimage.maximum_filter(response, size=3)
    keep = local_max & (response > max(rel_threshold * peak, _CORNER_ABS_FLOOR))
    vv, uu = np.nonzero(keep)
    order = np.argsort(response[vv, uu])[::-1]
    return np.stack([uu[order], vv[order]], axis=1)


def appearance_complexity(frame: FrameRGBD, keypoints: np.ndarray,
                          threshold: float = DEFAULT_APPEARANCE_THRESHOLD
                          ) -> tuple[float, bool]:
    """Keypoint density per 1000 masked pixels and the low-texture flag.

    Raises:
        EmptyMask: for a frame whose mask selects nothing.
    """
    n_masked = frame.masked_pixel_count
    if n_masked == 0:
        raise EmptyMask("appearance complexity needs masked pixels")
    keypoints = np.asarray(keypoints).reshape(-1, 2)
    if len(keypoints):
        ui = np.clip(keypoints[:, 0].round().astype(int), 0, frame.mask.shape[1] - 1)
        vi = np.clip(keypoints[:, 1].round().astype(int), 0, frame.mask.shape[0] - 1)
        in_mask = int(np.count_nonzero(frame.mask[vi, ui]))
    else:
        in_mask = 0
    density = in_mask / (n_masked / 1000.0)
    return density, density < threshold


def point_curvatures(cloud: PointCloud, radius: float = DEFAULT_CURVATURE_RADIUS,
                     max_neighbors: int = DEFAULT_CURVATURE_NEIGHBORS
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Per-point curvature k = l1 / (l1 + l2 + l3) from local covariance.

    Returns (curvatures, valid) where invalid points had fewer than three
    neighbors inside the radius.
    """
    pts = cloud.points
    if len(pts) < 3:
        raise TooFewPoints(f"need >= 3 points, got {len(pts)}")
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, r=radius)
    curvatures = np.zeros(len(pts))
    valid = np.zeros(len(pts), dtype=bool)
    for i, idx in enumerate(neighborhoods):
        if len(idx) > max_neighbors:
            d = np.linalg.norm(pts[idx] - pts[i], axis=1)
            idx = [idx[j] for j in np.argsort(d)[:max_neighbors]]
        if len(idx) < 3:
            continue
        cov = np.cov(pts[idx].T, bias=True)
        eig = np.linalg.eigvalsh(cov)
        total = eig.sum()
        if total <= 0:
            continue
        curvatures[i] = max(0.0, eig[0]) / total
        valid[i] = True
    return curvatures, valid


def geometric_complexity(cloud: PointCloud, radius: float = DEFAULT_CURVATURE_RADIUS,
                         max_neighbors: int = DEFAULT_CURVATURE_NEIGHBORS,
                         threshold: float = DEFAULT_GEOMETRY_THRESHOLD
                         ) -> tuple[float, bool]:
    """Mean curvature over points with valid neighborhoods + low-geometry flag.

    Raises:
        TooFewPoints: fewer than 3 points in the cloud.
    """
    curvatures, valid = point_curvatures(cloud, radius, max_neighbors)
    if not valid.any():
        return 0.0, True
    mean_curvature = float(curvatures[valid].mean())
    return mean_curvature, mean_curvature < threshold


def score_frame(frame: FrameRGBD, cloud: PointCloud,
                keypoints: np.ndarray | None = None,
                appearance_threshold: float = DEFAULT_APPEARANCE_THRESHOLD,
                geometry_threshold: float = DEFAULT_GEOMETRY_THRESHOLD,
                radius: float = DEFAULT_CURVATURE_RADIUS,
                max_neighbors: int = DEFAULT_CURVATURE_NEIGHBORS) -> ComplexityScores:
    """Convenience wrapper computing both scores for one frame."""
    if keypoints is None:
        keypoints = detect_corners(frame)
    density, low_texture = appearance_complexity(frame, keypoints, appearance_threshold)
    kappa, low_geometry = geometric_complexity(cloud, radius, max_neighbors,
                                               geometry_threshold)
    return ComplexityScores(appearance_density=density, low_texture=low_texture,
                            geometric_complexity=kappa, low_geometry=low_geometry)
