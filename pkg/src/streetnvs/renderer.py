"""Compositional volume rendering: foreground volume + background + sky.

Rays are split at the foreground box boundary.  Inside, samples are placed
by stratified sampling plus iterative importance resampling against the
current density field; outside, samples are spaced uniformly in inverse
distance out to the far cap.  Sample positions are data (no gradient flows
into them); densities and colors are tape tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import Intrinsics, PoseSE3, project_points
from .config import SamplingConfig
from .fusion import ForegroundAABB
from .networks import FieldModel, normalize_to_aabb

_EPS_ALPHA = 1e-6


@dataclass
class Rays:
    origins: np.ndarray    # [N, 3]
    dirs: np.ndarray       # [N, 3], unit norm
    z_factor: np.ndarray   # [N] z-depth per unit ray length


def camera_rays(pose: PoseSE3, intr: Intrinsics,
                pixels: np.ndarray | None = None) -> Rays:
    """Rays through pixel centers; `pixels` are flat row-major indices."""
    uv = intr.pixel_grid()
    if pixels is not None:
        uv = uv[pixels]
    raw = np.stack([(uv[:, 0] - intr.cx) / intr.fx,
                    (uv[:, 1] - intr.cy) / intr.fy,
                    np.ones(len(uv))], axis=1)
    norms = np.linalg.norm(raw, axis=1)
    dirs = (raw / norms[:, None]) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return Rays(origins, dirs, 1.0 / norms)


def select_reference_views(target_pose: PoseSE3, ref_poses: list[PoseSE3],
                           k: int, exclude: int | None = None) -> list[int]:
    """Indices of the k references nearest by camera center.

    Ties break toward the lower frame index.  `exclude` removes the target
    itself when it is a member of the reference set.
    """
    candidates = [i for i in range(len(ref_poses)) if i != exclude]
    if len(candidates) < k:
        raise ValueError(f"need at least {k} reference views, have {len(candidates)}")
    c = target_pose.center()
    dists = np.array([np.linalg.norm(ref_poses[i].center() - c)
                      for i in candidates])
    order = np.argsort(dists, kind="stable")
    return [candidates[i] for i in order[:k]]


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample at continuous coords (pixel centers at +0.5), edge-clamped."""
    h, w = image.shape[:2]
    p = uv - 0.5
    x = np.clip(p[:, 0], 0.0, w - 1.0)
    y = np.clip(p[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(x.astype(np.int64), w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(y.astype(np.int64), h - 2) if h > 1 else np.zeros(len(y), np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return ((image[y0, x0] * (1 - fx) + image[y0, x1] * fx) * (1 - fy)
            + (image[y1, x0] * (1 - fx) + image[y1, x1] * fx) * fy)


def retrieve_2d(points: np.ndarray, images: list[np.ndarray],
                poses: list[PoseSE3], intr: Intrinsics,
                selected: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated bilinear colors from the selected reference views.

    Views where a point lands behind the camera or outside the image
    contribute zeros and a False validity flag.
    """
    n = len(points)
    feats = np.zeros((n, 3 * len(selected)), dtype=np.float32)
    valid = np.zeros((n, len(selected)), dtype=bool)
    for s, j in enumerate(selected):
        uv, _, front = project_points(points, intr, poses[j])
        ok = front & ((uv[:, 0] >= 0) & (uv[:, 0] <= intr.width)
                      & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height))
        if ok.any():
            feats[ok, 3 * s:3 * s + 3] = bilinear_sample(images[j], uv[ok])
        valid[:, s] = ok
    return feats, valid


def intersect_aabb(origins: np.ndarray, dirs: np.ndarray,
                   aabb: ForegroundAABB, near: float):
    """Slab test; returns (t_enter, t_exit, hit) clamped to the near plane."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (aabb.min - origins) * inv
        t1 = (aabb.max - origins) * inv
    tn = np.nanmax(np.minimum(t0, t1), axis=1)
    tf = np.nanmin(np.maximum(t0, t1), axis=1)
    hit = (tf > np.maximum(tn, near)) & (tf > 0)
    t_enter = np.maximum(tn, near)
    return t_enter, tf, hit


def stratified_samples(rng: np.random.Generator, lo: np.ndarray,
                       hi: np.ndarray, n: int) -> np.ndarray:
    """One jittered sample per uniform bin of [lo, hi] per ray."""
    edges = np.linspace(0.0, 1.0, n + 1)
    u = edges[:-1][None, :] + rng.random((len(lo), n)) / n
    return lo[:, None] + (hi - lo)[:, None] * u


def inverse_distance_samples(rng: np.random.Generator, start: np.ndarray,
                             far: float, n: int) -> np.ndarray:
    """Stratified in 1/t between each ray's start and the far cap."""
    s = stratified_samples(rng, np.zeros(len(start)), np.ones(len(start)), n)
    inv_start = 1.0 / np.maximum(start, 1e-3)
    inv_far = 1.0 / far
    return 1.0 / (inv_start[:, None] * (1 - s) + inv_far * s)


def _weights_from_sigma(sigma: np.ndarray, t: np.ndarray,
                        t_end: np.ndarray) -> np.ndarray:
    delta = np.diff(np.concatenate([t, t_end[:, None]], axis=1), axis=1)
    tau = sigma * np.maximum(delta, 0)
    trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
    return trans * (1 - np.exp(-tau))


def sample_pdf(rng: np.random.Generator, t: np.ndarray, weights: np.ndarray,
               lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant weight distribution.

    Bin edges are [lo, t_1..t_S, hi]; rows whose weights all vanish fall
    back to uniform sampling over [lo, hi].
    """
    edges = np.concatenate([lo[:, None], t, hi[:, None]], axis=1)
    w = np.concatenate([np.full((len(t), 1), 1e-8), weights], axis=1)
    w = np.maximum(w, 0)
    total = w.sum(axis=1, keepdims=True)
    flat = total[:, 0] <= 1e-7
    w[flat] = 1.0  # uniform fallback for all-zero coarse weights
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(t), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((len(t), n))
    # batched searchsorted: each row's cdf spans [r, r+1] after shifting
    rows_off = np.arange(len(t), dtype=np.float64)[:, None]
    idx = np.searchsorted((cdf + rows_off).ravel(),
                          (u + rows_off).ravel(), side="right")
    idx = idx.reshape(len(t), n) - np.arange(len(t))[:, None] * cdf.shape[1] - 1
    idx = np.clip(idx, 0, w.shape[1] - 1)
    rows = np.arange(len(t))[:, None]
    c0 = cdf[rows, idx]
    c1 = cdf[rows, idx + 1]
    frac = np.where(c1 > c0, (u - c0) / np.maximum(c1 - c0, 1e-12), 0.5)
    e0 = edges[rows, idx]
    e1 = edges[rows, idx + 1]
    return e0 + frac * (e1 - e0)


def hierarchical_fg_samples(rng, density_fn, origins, dirs, t_enter, t_exit,
                            cfg: SamplingConfig) -> np.ndarray:
    """Uniform half plus iterative importance sampling, merged and sorted."""
    if (cfg.n_uniform + cfg.n_importance) % 2:
        raise ValueError("total foreground sample count must be even")
    t = np.sort(stratified_samples(rng, t_enter, t_exit, cfg.n_uniform), axis=1)
    iters = max(cfg.importance_iters, 1) if cfg.n_importance else 0
    for r in range(iters):
        n_new = cfg.n_importance // iters
        if r == iters - 1:
            n_new = cfg.n_importance - n_new * (iters - 1)
        sigma = density_fn(
            (origins[:, None] + t[..., None] * dirs[:, None]).reshape(-1, 3),
            np.repeat(dirs, t.shape[1], axis=0)).reshape(t.shape)
        w = _weights_from_sigma(sigma, t, t_exit)
        t_new = sample_pdf(rng, t, w, t_enter, t_exit, n_new)
        t = np.sort(np.concatenate([t, t_new], axis=1), axis=1)
    return t


@dataclass
class RenderResult:
    color: Tensor | None     # [N, 3]
    alpha: Tensor            # [N] total fg+bg opacity
    alpha_fg: Tensor         # [N] opacity of foreground-tagged samples
    depth: Tensor            # [N] expected distance along the ray
    weights: Tensor          # [N, S]
    tvals: np.ndarray        # [N, S]
    deltas: np.ndarray       # [N, S]
    fg_mask: np.ndarray      # [N, S]


def composite(sigma: Tensor, tvals: np.ndarray, deltas: np.ndarray,
              fg_mask: np.ndarray, rgb: Tensor | None = None,
              sky_rgb: Tensor | None = None) -> RenderResult:
    """Quadrature-weighted alpha compositing with a sky backdrop.

    w_i = T_i (1 - exp(-sigma_i delta_i)), T the accumulated transmittance;
    the final color adds (1 - alpha) of the per-ray sky color.
    """
    if np.any(np.diff(tvals, axis=1) < 0):
        raise ValueError("samples must be sorted along each ray")
    tau = sigma * deltas
    cum = ad.cumsum(tau, axis=1)
    trans = ad.exp(tau - cum)            # exclusive cumulative sum
    alpha_i = 1.0 - ad.exp(-tau)
    w = trans * alpha_i
    alpha = w.sum(axis=1)
    alpha_fg = (w * fg_mask).sum(axis=1)
    depth = (w * tvals).sum(axis=1) / ad.clampmin(alpha, _EPS_ALPHA)
    color = None
    if rgb is not None:
        n, s = sigma.shape
        color = (w.reshape(n, s, 1) * rgb).sum(axis=1)
        if sky_rgb is not None:
            color = color + (1.0 - alpha).reshape(n, 1) * sky_rgb
    return RenderResult(color=color, alpha=alpha, alpha_fg=alpha_fg,
                        depth=depth, weights=w, tvals=tvals, deltas=deltas,
                        fg_mask=fg_mask)


class SceneRenderer:
    """Binds a model to one scene's reference data and feature volume."""

    def __init__(self, model: FieldModel, aabb: ForegroundAABB,
                 intr: Intrinsics, ref_images: list[np.ndarray],
                 ref_poses: list[PoseSE3], sampling: SamplingConfig,
                 feature_volume: Tensor | None = None):
        self.model = model
        self.aabb = aabb
        self.intr = intr
        self.ref_images = ref_images
        self.ref_poses = ref_poses
        self.cfg = sampling
        self.feature_volume = feature_volume
        if model.cfg.use_3d_features and feature_volume is None:
            raise ValueError("model needs a feature volume for this scene")

    # -- density-only callback for importance sampling -------------------
    def _density(self, selected):
        def fn(points, dirs):
            with ad.no_grad():
                inside = self.aabb.contains(points)
                out = np.zeros(len(points), dtype=np.float64)
                if inside.any():
                    if self.model.cfg.use_3d_features:
                        xn = normalize_to_aabb(points[inside], self.aabb)
                        f3d, _ = ad.grid_sample_trilinear(
                            self.feature_volume, (xn + 1.0) * 0.5)
                        out[inside] = self.model.density_foreground(f3d).data
                    else:
                        f2d, _ = retrieve_2d(points[inside], self.ref_images,
                                             self.ref_poses, self.intr, selected)
                        xn = normalize_to_aabb(points[inside], self.aabb)
                        s, _ = self.model.query_foreground_2d(
                            xn, dirs[inside], f2d,
                            ad.zeros(self.model.cfg.app_dim),
                            density_only=True)
                        out[inside] = s.data
                return out
        return fn

    def render_rays(self, rays: Rays, selected: list[int], app: Tensor,
                    rng: np.random.Generator,
                    want_color: bool = True) -> RenderResult:
        cfg = self.cfg
        n = len(rays.origins)
        s_fg = cfg.n_uniform + cfg.n_importance
        s_total = s_fg + cfg.n_background
        t_enter, t_exit, hit = intersect_aabb(rays.origins, rays.dirs,
                                              self.aabb, cfg.near)

        tvals = np.empty((n, s_total))
        fg_mask = np.zeros((n, s_total), dtype=bool)
        if hit.any():
            t_fg = hierarchical_fg_samples(
                rng, self._density(selected), rays.origins[hit],
                rays.dirs[hit], t_enter[hit], t_exit[hit], cfg)
            t_bg = inverse_distance_samples(rng, t_exit[hit], cfg.far,
                                            cfg.n_background)
            tvals[hit] = np.concatenate([t_fg, np.sort(t_bg, axis=1)], axis=1)
            fg_mask[hit, :s_fg] = True
        if (~hit).any():
            t_miss = inverse_distance_samples(
                rng, np.full((~hit).sum(), max(cfg.near, 0.5)), cfg.far,
                s_total)
            tvals[~hit] = np.sort(t_miss, axis=1)

        deltas = np.diff(tvals, axis=1)
        deltas = np.concatenate(
            [deltas, np.full((n, 1), cfg.last_delta)], axis=1)

        points = rays.origins[:, None] + tvals[..., None] * rays.dirs[:, None]
        dirs_flat = np.repeat(rays.dirs, s_total, axis=0)
        flat_pts = points.reshape(-1, 3)
        flat_fg = fg_mask.ravel()

        idx_fg = np.flatnonzero(flat_fg)
        idx_bg = np.flatnonzero(~flat_fg)
        parts_sigma = []
        parts_rgb = []
        if idx_fg.size:
            pts = flat_pts[idx_fg]
            # float roundoff can push boundary samples epsilon outside
            pts = np.clip(pts, self.aabb.min + 1e-9, self.aabb.max - 1e-9)
            f2d, _ = retrieve_2d(pts, self.ref_images, self.ref_poses,
                                 self.intr, selected)
            if self.model.cfg.use_3d_features:
                sig, rgb = self.model.query_foreground(
                    pts, dirs_flat[idx_fg], self.feature_volume, self.aabb,
                    f2d, app)
            else:
                sig, rgb = self.model.query_foreground_2d(
                    normalize_to_aabb(pts, self.aabb), dirs_flat[idx_fg],
                    f2d, app)
            parts_sigma.append((sig, idx_fg))
            parts_rgb.append((rgb, idx_fg))
        if idx_bg.size:
            pts = flat_pts[idx_bg]
            f2d, _ = retrieve_2d(pts, self.ref_images, self.ref_poses,
                                 self.intr, selected)
            sig, rgb = self.model.query_background(pts, dirs_flat[idx_bg],
                                                   self.aabb, f2d, app)
            parts_sigma.append((sig, idx_bg))
            parts_rgb.append((rgb, idx_bg))

        sigma = None
        for val, idx in parts_sigma:
            scattered = ad.put_rows(val, idx, n * s_total)
            sigma = scattered if sigma is None else sigma + scattered
        sigma = sigma.reshape(n, s_total)

        rgb_all = None
        sky = None
        if want_color:
            for val, idx in parts_rgb:
                scattered = ad.put_rows(val, idx, n * s_total)
                rgb_all = scattered if rgb_all is None else rgb_all + scattered
            rgb_all = rgb_all.reshape(n, s_total, 3)
            far_pts = rays.origins + cfg.far * rays.dirs
            f2d_sky, _ = retrieve_2d(far_pts, self.ref_images, self.ref_poses,
                                     self.intr, selected)
            sky = self.model.query_sky(rays.dirs, f2d_sky)

        return composite(sigma, tvals, deltas, fg_mask, rgb_all, sky)

    def render_image(self, pose: PoseSE3, app: Tensor,
                     rng: np.random.Generator, chunk: int = 4096,
                     exclude_ref: int | None = None):
        """Full-frame render; returns (rgb, alpha, z-depth) numpy maps."""
        intr = self.intr
        selected = select_reference_views(pose, self.ref_poses,
                                          self.model.cfg.n_ref_views,
                                          exclude=exclude_ref)
        n_pix = intr.width * intr.height
        rgb = np.zeros((n_pix, 3), dtype=np.float32)
        alpha = np.zeros(n_pix, dtype=np.float32)
        depth = np.zeros(n_pix, dtype=np.float32)
        with ad.no_grad():
            for lo in range(0, n_pix, chunk):
                pix = np.arange(lo, min(lo + chunk, n_pix))
                rays = camera_rays(pose, intr, pix)
                res = self.render_rays(rays, selected, app, rng)
                rgb[pix] = res.color.data
                alpha[pix] = res.alpha.data
                depth[pix] = res.depth.data * rays.z_factor
        shape = (intr.height, intr.width)
        return (rgb.reshape(*shape, 3), alpha.reshape(shape),
                depth.reshape(shape))
