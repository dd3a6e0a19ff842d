"""Pinhole cameras, SE(3) poses, depth reprojection and consistency filtering.

Conventions: camera frame is x-right / y-down / z-forward; depth is z-depth
along the optical axis (not ray length); pixel (i, j) has its center at the
continuous coordinate (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEPTH_MAGIC = b"EDUSDEP1"
ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx],
                         [0, self.fy, self.cy],
                         [0, 0, 1]], dtype=np.float64)

    def pixel_grid(self) -> np.ndarray:
        """[H*W, 2] continuous center coordinates (u, v), row-major."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1)


@dataclass(frozen=True)
class PoseSE3:
    """Camera-to-world rotation and translation."""

    rotation: np.ndarray    # [3, 3]
    translation: np.ndarray  # [3]

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")

    def matrix34(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def center(self) -> np.ndarray:
        return self.translation


class DepthMap:
    """Metric z-depth per pixel; nonpositive or non-finite means invalid."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("depth map must be 2-D")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values) & (self.values > 0)

    @property
    def shape(self):
        return self.values.shape


def unproject_pixel(u, d, intr: Intrinsics, pose: PoseSE3) -> np.ndarray:
    """World point of a homogeneous pixel coordinate at z-depth d."""
    if d <= 0:
        raise ValueError("depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    ray = np.array([(u[0] - intr.cx) / intr.fx,
                    (u[1] - intr.cy) / intr.fy, 1.0])
    return d * (pose.rotation @ ray) + pose.translation


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, intr: Intrinsics,
                     pose: PoseSE3) -> np.ndarray:
    """Vectorized unprojection: uv [N, 2] continuous coords, depth [N]."""
    rays = np.stack([(uv[:, 0] - intr.cx) / intr.fx,
                     (uv[:, 1] - intr.cy) / intr.fy,
                     np.ones(len(uv))], axis=1)
    return depth[:, None] * (rays @ pose.rotation.T) + pose.translation


def project_point(x, intr: Intrinsics, pose: PoseSE3):
    """(pixel uv, camera z-depth, in-front flag) for a world point."""
    uv, z, valid = project_points(np.asarray(x, dtype=np.float64)[None],
                                  intr, pose)
    return uv[0], float(z[0]), bool(valid[0])


def project_points(x: np.ndarray, intr: Intrinsics, pose: PoseSE3):
    """Vectorized projection; points behind the camera are flagged invalid."""
    cam = (x - pose.translation) @ pose.rotation
    z = cam[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    uv = np.stack([u, v], axis=1)
    uv[~in_front] = -1.0
    return uv, z, in_front


def in_image(uv: np.ndarray, intr: Intrinsics) -> np.ndarray:
    return ((uv[:, 0] >= 0) & (uv[:, 0] <= intr.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height))


def reproject_depth(depth_i: DepthMap, pose_i: PoseSE3, pose_j: PoseSE3,
                    intr: Intrinsics) -> DepthMap:
    """Splat frame i's depth into frame j's grid with a z-buffer.

    Nearest-pixel splatting, no interpolation: unobserved pixels stay
    invalid instead of being hallucinated.
    """
    h, w = depth_i.shape
    valid = depth_i.valid.ravel()
    uv = intr.pixel_grid()[valid]
    d = depth_i.values.ravel()[valid].astype(np.float64)
    world = unproject_pixels(uv, d, intr, pose_i)
    uv_j, z_j, front = project_points(world, intr, pose_j)
    keep = front & in_image(uv_j, intr)
    cols = np.minimum(uv_j[keep, 0].astype(np.int64), intr.width - 1)
    rows = np.minimum(uv_j[keep, 1].astype(np.int64), intr.height - 1)
    buf = np.full((h, w), np.inf, dtype=np.float64)
    np.minimum.at(buf, (rows, cols), z_j[keep])
    out = np.where(np.isfinite(buf), buf, 0.0).astype(np.float32)
    return DepthMap(out)


def consistency_mask(depth_ij: DepthMap, depth_j: DepthMap,
                     sigma: float) -> np.ndarray:
    """Pixels kept iff both depths valid and |difference| <= sigma."""
    if depth_ij.shape != depth_j.shape:
        raise ValueError("depth maps must have the same resolution")
    both = depth_ij.valid & depth_j.valid
    diff = np.abs(depth_ij.values - depth_j.values)
    return both & (diff <= sigma)


def filter_depth_by_consistency(depth_i: DepthMap, pose_i: PoseSE3,
                                depth_j: DepthMap, pose_j: PoseSE3,
                                intr: Intrinsics, sigma: float) -> np.ndarray:
    """Per-pixel keep mask for frame i, checked against neighbour j.

    A pixel is dropped only on positive evidence of inconsistency: its
    point lands inside j's image, j has a valid depth there, and the depths
    disagree by more than sigma.  Unobservable pixels are kept.
    """
    h, w = depth_i.shape
    keep = depth_i.valid.copy()
    valid_idx = np.flatnonzero(keep.ravel())
    if valid_idx.size == 0:
        return keep
    uv = intr.pixel_grid()[valid_idx]
    d = depth_i.values.ravel()[valid_idx].astype(np.float64)
    world = unproject_pixels(uv, d, intr, pose_i)
    uv_j, z_j, front = project_points(world, intr, pose_j)
    inside = front & in_image(uv_j, intr)
    cols = np.minimum(uv_j[inside, 0].astype(np.int64), intr.width - 1)
    rows = np.minimum(uv_j[inside, 1].astype(np.int64), intr.height - 1)
    ref = depth_j.values[rows, cols]
    observed = (ref > 0) & np.isfinite(ref)
    bad = observed & (np.abs(z_j[inside] - ref) > sigma)
    drop = valid_idx[inside][bad]
    keep.ravel()[drop] = False
    return keep


# -- file formats ------------------------------------------------------------

def save_poses(path, poses: list[PoseSE3]):
    lines = []
    for p in poses:
        lines.append(" ".join(f"{v:.17g}" for v in p.matrix34().ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> list[PoseSE3]:
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise ValueError(f"{path}:{ln + 1}: expected 12 values")
        m = np.array(vals).reshape(3, 4)
        poses.append(PoseSE3(m[:, :3], m[:, 3]))
    return poses


def save_intrinsics(path, intr: Intrinsics):
    Path(path).write_text(
        f"{intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} {intr.cy:.17g} "
        f"{intr.width} {intr.height}\n")


def load_intrinsics(path) -> Intrinsics:
    vals = Path(path).read_text().split()
    if len(vals) != 6:
        raise ValueError(f"{path}: expected 'fx fy cx cy width height'")
    return Intrinsics(float(vals[0]), float(vals[1]), float(vals[2]),
                      float(vals[3]), int(vals[4]), int(vals[5]))


def save_depth(path, depth: DepthMap):
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(depth.values, dtype="<f4").tobytes())


def load_depth(path) -> DepthMap:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth file")
    w, h = struct.unpack_from("<II", blob, 8)
    vals = np.frombuffer(blob, dtype="<f4", count=w * h, offset=16)
    return DepthMap(vals.reshape(h, w).copy())
