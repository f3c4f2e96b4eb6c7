"""In-memory RGB-D sequence containers and the on-disk dataset layout.

Disk layout per sequence directory:
  intrinsics.json            fx, fy, cx, cy, width, height, depth_scale
  rgb/%06d.png               8-bit, 3-channel color
  depth/%06d.png             16-bit single channel; value / depth_scale = meters
  mask/%06d.png              8-bit; >= 128 marks the object
  gt_poses.json              optional; per frame a row-major 4x4 object-to-camera
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .geom import CameraIntrinsics, RigidPose


@dataclass
class FrameRGBD:
    """One ingested frame: color in [0, 1], metric depth (0 = invalid), mask."""

    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    index: int

    @property
    def masked_pixel_count(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class RGBDDataset:
    """A full sequence plus camera intrinsics and optional GT poses."""

    camera: CameraIntrinsics
    frames: list[FrameRGBD]
    gt_poses: list[RigidPose] | None = None
    name: str = "dataset"
    seed: int = 0

    def __len__(self) -> int:
        return len(self.frames)


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def save_dataset(dataset: RGBDDataset, root: str | Path) -> Path:
    """Write a dataset in the standard layout; quantizes depth by depth_scale."""
    root = Path(root)
    for sub in ("rgb", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    K = dataset.camera
    meta = {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
            "width": K.width, "height": K.height, "depth_scale": K.depth_scale}
    (root / "intrinsics.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for f in dataset.frames:
        stem = f"{f.index:06d}.png"
        rgb8 = np.clip(np.round(f.rgb * 255.0), 0, 255).astype(np.uint8)
        _write_png(root / "rgb" / stem, rgb8)
        d16 = np.clip(np.round(f.depth * K.depth_scale), 0, 65535).astype(np.uint16)
        _write_png(root / "depth" / stem, d16)
        m8 = np.where(f.mask, 255, 0).astype(np.uint8)
        _write_png(root / "mask" / stem, m8)
    if dataset.gt_poses is not None:
        mats = [p.matrix().reshape(-1).tolist() for p in dataset.gt_poses]
        (root / "gt_poses.json").write_text(json.dumps(mats))
    return root


def load_dataset(root: str | Path) -> RGBDDataset:
    """Load a dataset directory, validating frame counts and image shapes.

    Raises:
        DatasetError: missing files or inconsistent dimensions.
    """
    root = Path(root)
    intr = root / "intrinsics.json"
    if not intr.is_file():
        raise DatasetError(f"missing {intr}")
    meta = json.loads(intr.read_text())
    try:
        K = CameraIntrinsics(
            fx=float(meta["fx"]), fy=float(meta["fy"]),
            cx=float(meta["cx"]), cy=float(meta["cy"]),
            width=int(meta["width"]), height=int(meta["height"]),
            depth_scale=float(meta["depth_scale"]))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"bad intrinsics.json: {exc}") from exc

    listings = {}
    for sub in ("rgb", "depth", "mask"):
        d = root / sub
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")
        listings[sub] = sorted(d.glob("*.png"))
    counts = {sub: len(v) for sub, v in listings.items()}
    if len(set(counts.values())) != 1 or counts["rgb"] == 0:
        raise DatasetError(f"frame counts differ or are zero: {counts}")

    frames = []
    for i, (rp, dp, mp) in enumerate(zip(*listings.values())):
        rgb = np.asarray(Image.open(rp), dtype=np.float64) / 255.0
        depth_raw = np.asarray(Image.open(dp))
        depth = depth_raw.astype(np.float64) / K.depth_scale
        mask = np.asarray(Image.open(mp)) >= 128
        for name, arr in (("rgb", rgb[..., 0]), ("depth", depth), ("mask", mask)):
            if arr.shape != (K.height, K.width):
                raise DatasetError(
                    f"{name} frame {i} shape {arr.shape} does not match intrinsics")
        frames.append(FrameRGBD(rgb=rgb[..., :3], depth=depth, mask=mask, index=i))

    gt_poses = None
    gp = root / "gt_poses.json"
    if gp.is_file():
        mats = json.loads(gp.read_text())
        if len(mats) != len(frames):
            raise DatasetError("gt_poses.json length does not match frame count")
        gt_poses = [RigidPose.from_matrix(np.array(m).reshape(4, 4)) for m in mats]
    return RGBDDataset(camera=K, frames=frames, gt_poses=gt_poses, name=root.name)


def save_trajectory(path: str | Path, poses: list[RigidPose],
                    provenance: list[str] | None = None) -> None:
    """Write a trajectory as JSON: per frame a 4x4 pose plus provenance tag."""
    entries = []
    for i, p in enumerate(poses):
        entry = {"frame": i, "pose": p.matrix().reshape(-1).tolist()}
        if provenance is not None:
            entry["provenance"] = provenance[i]
        entries.append(entry)
    Path(path).write_text(json.dumps(entries))


def load_trajectory(path: str | Path) -> tuple[list[RigidPose], list[str]]:
    entries = json.loads(Path(path).read_text())
    poses = [RigidPose.from_matrix(np.array(e["pose"]).reshape(4, 4)) for e in entries]
    provenance = [e.get("provenance", "") for e in entries]
    return poses, provenance
