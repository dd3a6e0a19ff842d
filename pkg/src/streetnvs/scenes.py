"""Procedural street scenes with exact ground truth, dataset I/O, splits.

A scene is a straight corridor: textured ground plane and side walls, a
few colored box obstacles, and a view-dependent sky gradient.  Cameras
move forward in stereo pairs.  Depth, sky masks and lidar returns come
from the analytic ray tracer; the stored depth maps are corrupted with
Gaussian noise plus a fraction of +-0.5 m outliers to mimic a real
estimator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import (
    DepthMap,
    Intrinsics,
    PoseSE3,
    load_depth,
    load_intrinsics,
    load_poses,
    save_depth,
    save_intrinsics,
    save_poses,
)
from .config import parse_config_text, _coerce


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    width: int = 160
    height: int = 96
    focal: float = 80.0
    n_positions: int = 11          # stereo pairs; frames = 2 * n_positions
    frame_spacing: float = 3.6     # meters between pairs along +Z
    path_z_start: float = -15.0
    stereo_baseline: float = 0.3
    jitter_deg: float = 1.2        # random yaw/pitch per pair
    ground_y: float = 1.6          # y points down; ground is below the camera
    wall_x: float = 9.5
    wall_top_y: float = -2.8
    wall_z_min: float = -25.0
    wall_z_max: float = 90.0
    n_boxes: int = 6
    box_min_size: float = 1.0
    box_max_size: float = 3.2
    box_z_min: float = -10.0
    box_z_max: float = 28.0
    depth_noise: float = 0.05
    outlier_fraction: float = 0.03
    exposure_amplitude: float = 0.05
    lidar_per_position: int = 250
    lidar_max_range: float = 200.0

    @staticmethod
    def from_file(path) -> "SyntheticSceneSpec":
        spec = SyntheticSceneSpec()
        for key, value in parse_config_text(Path(path).read_text()).items():
            key = key.removeprefix("scene.")
            if not any(f.name == key for f in fields(spec)):
                raise ValueError(f"unknown scene spec key {key!r}")
            setattr(spec, key, _coerce(value, getattr(spec, key)))
        return spec


@dataclass
class Frame:
    image: np.ndarray          # [H, W, 3] float32 in [0, 1]
    pose: PoseSE3
    depth: DepthMap            # noisy input depth
    depth_gt: DepthMap         # clean ground truth (diagnostics / oracles)
    sky: np.ndarray            # [H, W] bool


@dataclass
class SparsitySplit:
    drop_rate: float
    test_indices: list[int]
    ref_indices: list[int]


@dataclass
class SceneDataset:
    name: str
    intrinsics: Intrinsics
    frames: list[Frame]
    lidar_origins: np.ndarray | None = None   # [M, 3]
    lidar_points: np.ndarray | None = None    # [M, 3]
    splits: dict[int, SparsitySplit] = field(default_factory=dict)

    def n_frames(self) -> int:
        return len(self.frames)

    def split(self, drop_percent: int) -> SparsitySplit:
        if drop_percent not in self.splits:
            self.splits[drop_percent] = make_split(
                self.n_frames(), drop_percent / 100.0, seed=0)
        return self.splits[drop_percent]


class _Tracer:
    """Analytic ray tracer over the corridor geometry."""

    def __init__(self, spec: SyntheticSceneSpec, rng: np.random.Generator):
        self.spec = spec
        s = spec
        self.boxes = []
        palette = rng.uniform(0.15, 0.9, size=(s.n_boxes, 3))
        for i in range(s.n_boxes):
            sx, sy, sz = rng.uniform(s.box_min_size, s.box_max_size, size=3)
            side = -1.0 if rng.random() < 0.5 else 1.0
            cx = side * rng.uniform(1.8 + sx / 2, s.wall_x - 1.2 - sx / 2)
            cz = rng.uniform(s.box_z_min, s.box_z_max)
            lo = np.array([cx - sx / 2, s.ground_y - sy, cz - sz / 2])
            hi = np.array([cx + sx / 2, s.ground_y, cz + sz / 2])
            self.boxes.append((lo, hi, palette[i]))
        self.ground_base = rng.uniform(0.35, 0.55, size=3)
        self.wall_base = {
            -1.0: rng.uniform(0.3, 0.75, size=3),
            1.0: rng.uniform(0.3, 0.75, size=3),
        }
        self.phases = rng.uniform(0, 2 * np.pi, size=8)
        self.freqs = rng.uniform(0.7, 1.4, size=4)
        self.sky_top = rng.uniform([0.15, 0.3, 0.55], [0.3, 0.45, 0.75])
        self.sky_horizon = rng.uniform([0.65, 0.65, 0.6], [0.9, 0.85, 0.8])

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit along each ray: (t, surface id, hit point).

        t is measured in units of the given direction vectors; surface id
        -1 means sky.  Directions need not be normalized.
        """
        s = self.spec
        n = len(dirs)
        best_t = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)

        def consider(t, mask, sid):
            nonlocal best_t, best_id
            upd = mask & (t > 1e-6) & (t < best_t)
            best_t = np.where(upd, t, best_t)
            best_id = np.where(upd, sid, best_id)

        with np.errstate(divide="ignore", invalid="ignore"):
            # ground plane y = ground_y
            t = (s.ground_y - origins[:, 1]) / dirs[:, 1]
            pt_z = origins[:, 2] + t * dirs[:, 2]
            consider(t, (dirs[:, 1] > 0) & (pt_z >= s.wall_z_min)
                     & (pt_z <= s.wall_z_max), 0)
            # side walls x = +-wall_x
            for k, side in enumerate((-1.0, 1.0)):
                t = (side * s.wall_x - origins[:, 0]) / dirs[:, 0]
                y = origins[:, 1] + t * dirs[:, 1]
                z = origins[:, 2] + t * dirs[:, 2]
                ok = ((y >= s.wall_top_y) & (y <= s.ground_y)
                      & (z >= s.wall_z_min) & (z <= s.wall_z_max))
                consider(t, ok & np.isfinite(t), 1 + k)
            # boxes via the slab method
            for b, (lo, hi, _) in enumerate(self.boxes):
                inv = 1.0 / dirs
                t0 = (lo - origins) * inv
                t1 = (hi - origins) * inv
                tn = np.minimum(t0, t1).max(axis=1)
                tf = np.maximum(t0, t1).min(axis=1)
                consider(tn, (tf >= tn) & (tn > 1e-6), 3 + b)

        hit = np.isfinite(best_t)
        t_out = np.where(hit, best_t, 0.0)
        points = origins + t_out[:, None] * dirs
        return t_out, best_id, points

    def shade(self, points: np.ndarray, surf: np.ndarray,
              dirs: np.ndarray) -> np.ndarray:
        s = self.spec
        p = self.phases
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        col = np.zeros((len(points), 3))

        sky = surf == -1
        if sky.any():
            d = dirs[sky] / np.linalg.norm(dirs[sky], axis=1, keepdims=True)
            up = np.clip(-d[:, 1], 0, 1) ** 0.6
            azim = 0.04 * np.sin(np.arctan2(d[:, 0], d[:, 2]) * 2 + p[6])
            base = (self.sky_top[None] * up[:, None]
                    + self.sky_horizon[None] * (1 - up[:, None]))
            col[sky] = base + azim[:, None]

        g = surf == 0
        if g.any():
            mod = (1 + 0.22 * np.sin(self.freqs[0] * z[g] + p[0])
                   * np.sin(self.freqs[1] * x[g] + p[1]))
            lane = 1.0 + 0.12 * (np.abs(x[g]) < 2.2)
            col[g] = self.ground_base[None] * (mod * lane)[:, None]

        for k, side in enumerate((-1.0, 1.0)):
            m = surf == 1 + k
            if m.any():
                mod = (1 + 0.25 * np.sin(self.freqs[2] * z[m] + p[2 + k])
                       + 0.12 * np.sin(4.2 * y[m] + p[4 + k]))
                col[m] = self.wall_base[side][None] * mod[:, None]

        for b, (_, _, base) in enumerate(self.boxes):
            m = surf == 3 + b
            if m.any():
                mod = 1 + 0.1 * np.sin(2.5 * z[m] + p[7]) - 0.08 * y[m]
                col[m] = base[None] * mod[:, None]

        return np.clip(col, 0.02, 0.98)

    def point_inside_solid(self, c: np.ndarray) -> bool:
        s = self.spec
        if c[1] >= s.ground_y or abs(c[0]) >= s.wall_x:
            return True
        return any(np.all(c >= lo) and np.all(c <= hi)
                   for lo, hi, _ in self.boxes)


def _rotation_yaw_pitch(yaw: float, pitch: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return ry @ rx


def generate_scene(spec: SyntheticSceneSpec, name: str = "scene") -> SceneDataset:
    rng = np.random.default_rng(spec.seed)
    tracer = _Tracer(spec, rng)
    intr = Intrinsics(spec.focal, spec.focal, spec.width / 2, spec.height / 2,
                      spec.width, spec.height)

    poses = []
    for i in range(spec.n_positions):
        yaw = np.deg2rad(rng.uniform(-spec.jitter_deg, spec.jitter_deg))
        pitch = np.deg2rad(rng.uniform(-spec.jitter_deg, spec.jitter_deg))
        rot = _rotation_yaw_pitch(yaw, pitch)
        z = spec.path_z_start + i * spec.frame_spacing
        for side in (-0.5, 0.5):
            t = np.array([side * spec.stereo_baseline, 0.0, z])
            poses.append(PoseSE3(rot, t))
    for pose in poses:
        if tracer.point_inside_solid(pose.center()):
            raise ValueError("camera path intersects scene geometry")

    uv = intr.pixel_grid()
    rays_cam = np.stack([(uv[:, 0] - intr.cx) / intr.fx,
                         (uv[:, 1] - intr.cy) / intr.fy,
                         np.ones(len(uv))], axis=1)
    gains = 1.0 + rng.uniform(-spec.exposure_amplitude,
                              spec.exposure_amplitude, size=len(poses))

    frames = []
    for f, pose in enumerate(poses):
        dirs = rays_cam @ pose.rotation.T  # z-component of cam ray is 1 -> t is z-depth
        origins = np.broadcast_to(pose.translation, dirs.shape)
        t, surf, pts = tracer.trace(origins, dirs)
        color = tracer.shade(pts, surf, dirs).reshape(spec.height, spec.width, 3)
        image = np.clip(color * gains[f], 0.0, 1.0).astype(np.float32)
        sky = (surf == -1).reshape(spec.height, spec.width)
        depth_gt = np.where(surf == -1, 0.0, t).reshape(
            spec.height, spec.width).astype(np.float32)

        noisy = depth_gt + rng.normal(0, spec.depth_noise,
                                      size=depth_gt.shape).astype(np.float32)
        n_out = int(round(spec.outlier_fraction * depth_gt.size))
        if n_out:
            flat = rng.choice(depth_gt.size, size=n_out, replace=False)
            noisy.ravel()[flat] += rng.choice([-0.5, 0.5], size=n_out)
        noisy = np.where(depth_gt > 0, np.maximum(noisy, 0.05), 0.0)

        frames.append(Frame(image=image, pose=pose, depth=DepthMap(noisy),
                            depth_gt=DepthMap(depth_gt), sky=sky))

    # lidar: exact hits of random frustum rays, cast from each left camera
    lidar_o, lidar_p = [], []
    for i in range(spec.n_positions):
        pose = poses[2 * i]
        pick = rng.choice(len(rays_cam), size=spec.lidar_per_position,
                          replace=False)
        d = rays_cam[pick] @ pose.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(pose.translation, d.shape)
        t, surf, pts = tracer.trace(o, d)
        ok = (surf >= 0) & (t > 0.5) & (t < spec.lidar_max_range)
        lidar_o.append(o[ok])
        lidar_p.append(pts[ok])
    lidar_o = np.concatenate(lidar_o)
    lidar_p = np.concatenate(lidar_p)

    ds = SceneDataset(name=name, intrinsics=intr, frames=frames,
                      lidar_origins=lidar_o, lidar_points=lidar_p)
    for drop in (0, 50, 80, 90):
        try:
            ds.splits[drop] = make_split(len(frames), drop / 100.0, seed=0)
        except ValueError:
            pass  # drop rate too aggressive for this frame count
    return ds


def make_split(n_frames: int, drop_rate: float, seed: int) -> SparsitySplit:
    """Fixed stride-4 test frames; uniformly spaced reference subset.

    The test set is identical across drop rates by construction, which is
    what the evaluation protocol requires.
    """
    if not 0 <= drop_rate < 1:
        raise ValueError("drop rate must be in [0, 1)")
    test = list(range(0, n_frames, 4))
    remainder = [i for i in range(n_frames) if i not in test]
    n_keep = int(round(len(remainder) * (1.0 - drop_rate)))
    if n_keep < 3:
        raise ValueError(
            f"drop rate {drop_rate} leaves {n_keep} references (< 3)")
    pick = np.round(np.linspace(0, len(remainder) - 1, n_keep)).astype(int)
    refs = sorted({remainder[i] for i in pick})
    return SparsitySplit(drop_rate, test, refs)


# -- directory layout ---------------------------------------------------------

def save_png(path, img: np.ndarray):
    """Clamp to [0,1] and store as 8-bit; values are display-encoded already."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    if arr.ndim == 2:
        data = (arr * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    else:
        data = (arr * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr


def _frame_stem(index: int) -> str:
    return f"{index // 2:04d}_{'l' if index % 2 == 0 else 'r'}"


def save_lidar_ply(path, origins: np.ndarray, points: np.ndarray):
    """Binary PLY carrying hit points plus their sensor origins."""
    n = len(points)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float ox\nproperty float oy\nproperty float oz\n"
        "end_header\n"
    )
    rec = np.zeros(n, dtype=[("p", "<f4", 3), ("o", "<f4", 3)])
    rec["p"] = points.astype(np.float32)
    rec["o"] = origins.astype(np.float32)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def load_lidar_ply(path):
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:end].decode("ascii").splitlines()
    n = next(int(l.split()[-1]) for l in header if l.startswith("element vertex"))
    rec = np.frombuffer(blob, dtype=[("p", "<f4", 3), ("o", "<f4", 3)],
                        count=n, offset=end)
    return rec["o"].astype(np.float64), rec["p"].astype(np.float64)


def write_scene(ds: SceneDataset, root):
    root = Path(root)
    for sub in ("images", "depth", "depth_gt", "sky"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_intrinsics(root / "intrinsics.txt", ds.intrinsics)
    save_poses(root / "poses.txt", [f.pose for f in ds.frames])
    for i, fr in enumerate(ds.frames):
        stem = _frame_stem(i)
        save_png(root / "images" / f"{stem}.png", fr.image)
        save_depth(root / "depth" / f"{stem}.bin", fr.depth)
        save_depth(root / "depth_gt" / f"{stem}.bin", fr.depth_gt)
        save_png(root / "sky" / f"{stem}.png", fr.sky.astype(np.float32))
    if ds.lidar_points is not None and len(ds.lidar_points):
        save_lidar_ply(root / "lidar.ply", ds.lidar_origins, ds.lidar_points)
    for drop, split in sorted(ds.splits.items()):
        lines = ["test " + " ".join(map(str, split.test_indices)),
                 "ref " + " ".join(map(str, split.ref_indices))]
        (root / f"split_{drop}.txt").write_text("\n".join(lines) + "\n")


def load_scene(root) -> SceneDataset:
    root = Path(root)
    intr = load_intrinsics(root / "intrinsics.txt")
    poses = load_poses(root / "poses.txt")
    frames = []
    for i, pose in enumerate(poses):
        stem = _frame_stem(i)
        image = load_png(root / "images" / f"{stem}.png")
        depth = load_depth(root / "depth" / f"{stem}.bin")
        gt_path = root / "depth_gt" / f"{stem}.bin"
        depth_gt = load_depth(gt_path) if gt_path.exists() else depth
        sky = load_png(root / "sky" / f"{stem}.png") > 0.5
        frames.append(Frame(image=image, pose=pose, depth=depth,
                            depth_gt=depth_gt, sky=sky))
    lidar_o = lidar_p = None
    if (root / "lidar.ply").exists():
        lidar_o, lidar_p = load_lidar_ply(root / "lidar.ply")
    ds = SceneDataset(name=root.name, intrinsics=intr, frames=frames,
                      lidar_origins=lidar_o, lidar_points=lidar_p)
    for split_file in sorted(root.glob("split_*.txt")):
        drop = int(split_file.stem.split("_")[1])
        lines = split_file.read_text().splitlines()
        test = [int(v) for v in lines[0].split()[1:]]
        refs = [int(v) for v in lines[1].split()[1:]]
        ds.splits[drop] = SparsitySplit(drop / 100.0, test, refs)
    return ds
