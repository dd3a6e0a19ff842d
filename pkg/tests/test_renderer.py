import numpy as np
import pytest

import streetnvs.autodiff as ad
from streetnvs import renderer
from streetnvs.autodiff import Tensor
from streetnvs.cameras import Intrinsics, PoseSE3
from streetnvs.config import ModelConfig, SamplingConfig
from streetnvs.fusion import ForegroundAABB
from streetnvs.networks import FieldModel
from streetnvs.renderer import (
    SceneRenderer,
    bilinear_sample,
    camera_rays,
    composite,
    intersect_aabb,
    retrieve_2d,
    sample_pdf,
    select_reference_views,
    stratified_samples,
)


def pose_at(x=0.0, y=0.0, z=0.0):
    return PoseSE3(np.eye(3), np.array([x, y, z], dtype=np.float64))


def test_select_reference_views_nearest_three():
    target = pose_at()
    refs = [pose_at(z=d) for d in (4.0, 1.0, 3.0, 2.0)]
    assert select_reference_views(target, refs, 3) == [1, 3, 2]


def test_select_reference_views_tie_prefers_lower_index():
    target = pose_at()
    refs = [pose_at(x=1.0), pose_at(x=-1.0), pose_at(z=1.0), pose_at(z=5.0)]
    assert select_reference_views(target, refs, 3) == [0, 1, 2]


def test_select_reference_views_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    target = pose_at(*rng.normal(size=3))
    refs = [pose_at(*rng.normal(size=3) * 5) for _ in range(50)]
    got = select_reference_views(target, refs, 7)
    d = [np.linalg.norm(r.center() - target.center()) for r in refs]
    want = sorted(range(50), key=lambda i: (d[i], i))[:7]
    assert got == want


def test_select_reference_views_needs_enough_refs():
    with pytest.raises(ValueError):
        select_reference_views(pose_at(), [pose_at()] * 2, 3)


def test_select_reference_views_excludes_target_index():
    target = pose_at(z=1.0)
    refs = [pose_at(z=1.0), pose_at(z=2.0), pose_at(z=0.5), pose_at(z=9.0)]
    assert 0 not in select_reference_views(target, refs, 3, exclude=0)


def test_retrieve_constant_color_image():
    intr = Intrinsics(40.0, 40.0, 20.0, 15.0, 40, 30)
    img = np.full((30, 40, 3), 0.7, dtype=np.float32)
    pts = np.array([[0.0, 0.0, 5.0], [0.5, 0.2, 8.0]])
    feats, valid = retrieve_2d(pts, [img], [pose_at()], intr, [0])
    assert valid.all()
    np.testing.assert_allclose(feats, 0.7, atol=1e-6)


def test_retrieve_behind_camera_gives_zero_invalid():
    intr = Intrinsics(40.0, 40.0, 20.0, 15.0, 40, 30)
    img = np.ones((30, 40, 3), dtype=np.float32)
    pts = np.array([[0.0, 0.0, -5.0]])
    feats, valid = retrieve_2d(pts, [img, img], [pose_at(), pose_at(x=1)],
                               intr, [0, 1])
    assert not valid.any()
    np.testing.assert_array_equal(feats, 0.0)


def test_retrieve_matches_scalar_project_bilinear_oracle():
    rng = np.random.default_rng(1)
    intr = Intrinsics(35.0, 45.0, 20.0, 15.0, 40, 30)
    img = rng.uniform(0, 1, (30, 40, 3)).astype(np.float32)
    pose = pose_at(x=0.3, z=-1.0)
    pts = np.stack([rng.uniform(-2, 2, 100), rng.uniform(-1.5, 1.5, 100),
                    rng.uniform(3, 12, 100)], axis=1)
    feats, valid = retrieve_2d(pts, [img], [pose], intr, [0])
    for i in range(100):
        cam = pts[i] - pose.translation
        u = intr.fx * cam[0] / cam[2] + intr.cx
        v = intr.fy * cam[1] / cam[2] + intr.cy
        if not (0 <= u <= 40 and 0 <= v <= 30):
            assert not valid[i]
            continue
        x = np.clip(u - 0.5, 0, 39.0)
        y = np.clip(v - 0.5, 0, 29.0)
        x0, y0 = min(int(x), 38), min(int(y), 28)
        fx, fy = x - x0, y - y0
        want = ((img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx) * (1 - fy)
                + (img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx) * fy)
        np.testing.assert_allclose(feats[i], want, atol=1e-6)


def test_stratified_bin_midpoints():
    class MidRng:
        def random(self, shape):
            return np.full(shape, 0.5)

    t = stratified_samples(MidRng(), np.array([0.0]), np.array([8.0]), 4)
    np.testing.assert_allclose(t[0], [1.0, 3.0, 5.0, 7.0])


def test_sample_pdf_concentrates_on_heavy_bin():
    rng = np.random.default_rng(2)
    t = np.linspace(1.0, 9.0, 9)[None, :]
    w = np.full((1, 9), 1e-4)
    w[0, 4] = 1.0  # nearly all mass in [t_4, t_5] = [5, 6]
    samples = sample_pdf(rng, t, w, np.array([0.0]), np.array([10.0]), 200)
    frac = np.mean((samples >= 5.0) & (samples <= 6.0))
    assert frac >= 0.8


def test_sample_pdf_zero_weights_falls_back_to_uniform():
    rng = np.random.default_rng(3)
    t = np.linspace(1.0, 9.0, 9)[None, :]
    w = np.zeros((1, 9))
    samples = sample_pdf(rng, t, w, np.array([0.0]), np.array([10.0]), 2000)
    assert samples.min() < 0.5 and samples.max() > 9.5
    hist, _ = np.histogram(samples[0], bins=10, range=(0, 10))
    assert hist.min() > 120  # roughly flat


def test_intersect_aabb_inside_and_miss():
    aabb = ForegroundAABB([-1, -1, -1], [1, 1, 1])
    o = np.array([[0.0, 0, 0], [0, 0, -5.0], [0, 5.0, 0]])
    d = np.array([[0.0, 0, 1], [0, 0, 1.0], [0, 0, 1.0]])
    t0, t1, hit = intersect_aabb(o, d, aabb, near=0.05)
    assert hit[0] and hit[1] and not hit[2]
    assert t0[0] == pytest.approx(0.05)
    assert t1[0] == pytest.approx(1.0)
    assert t0[1] == pytest.approx(4.0)
    assert t1[1] == pytest.approx(6.0)


def const_composite_inputs(sigdelta, n_samples):
    t = np.cumsum(np.ones((1, n_samples)), axis=1)
    deltas = np.ones((1, n_samples))
    sigma = Tensor(np.full((1, n_samples), sigdelta))
    return sigma, t, deltas


def test_composite_zero_density_returns_sky():
    sigma, t, deltas = const_composite_inputs(0.0, 8)
    rgb = Tensor(np.ones((1, 8, 3)) * 0.3)
    sky = Tensor(np.array([[0.1, 0.6, 0.9]]))
    res = composite(sigma, t, deltas, np.zeros((1, 8), bool), rgb, sky)
    np.testing.assert_allclose(res.color.data, [[0.1, 0.6, 0.9]], atol=1e-12)
    assert res.alpha.data[0] == pytest.approx(0.0)


def test_composite_opaque_first_sample():
    sigma = Tensor(np.array([[1e4, 1.0]]))
    t = np.array([[1.0, 2.0]])
    deltas = np.ones((1, 2))
    rgb = Tensor(np.array([[[1.0, 0, 0], [0, 1.0, 0]]]))
    sky = Tensor(np.array([[0.0, 0, 1.0]]))
    res = composite(sigma, t, deltas, np.ones((1, 2), bool), rgb, sky)
    np.testing.assert_allclose(res.color.data, [[1, 0, 0]], atol=1e-9)
    assert res.alpha.data[0] == pytest.approx(1.0)
    assert res.depth.data[0] == pytest.approx(1.0)


def test_composite_two_sample_closed_form():
    ln2 = np.log(2.0)
    sigma = Tensor(np.array([[ln2, ln2]]))
    t = np.array([[1.0, 2.0]])
    deltas = np.ones((1, 2))
    fg = np.ones((1, 2), bool)
    rgb = Tensor(np.array([[[1.0, 0, 0], [0, 1.0, 0]]]))
    sky = Tensor(np.array([[0.0, 0, 1.0]]))
    res = composite(sigma, t, deltas, fg, rgb, sky)
    np.testing.assert_allclose(res.weights.data, [[0.5, 0.25]], atol=1e-9)
    np.testing.assert_allclose(res.color.data, [[0.5, 0.25, 0.25]], atol=1e-9)
    assert res.alpha.data[0] == pytest.approx(0.75)
    assert res.alpha_fg.data[0] == pytest.approx(0.75)


def test_composite_transmittance_monotone_and_weights_sum(rng=None):
    rng = np.random.default_rng(4)
    n, s = 200, 24
    with ad.test_mode():
        sigma = Tensor(rng.uniform(0, 3, (n, s)))
        t = np.sort(rng.uniform(0.1, 50, (n, s)), axis=1)
        deltas = np.concatenate([np.diff(t, axis=1), np.full((n, 1), 5.0)],
                                axis=1)
        fg = rng.random((n, s)) < 0.5
        res = composite(sigma, t, deltas, fg)
        w = res.weights.data
        tau = sigma.data * deltas
        trans = np.exp(-(np.cumsum(tau, 1) - tau))
        assert np.all(np.diff(trans, axis=1) <= 1e-12)
        np.testing.assert_allclose(w.sum(1), res.alpha.data, atol=1e-9)
        assert np.all(res.alpha.data <= 1.0 + 1e-9)
        assert np.all(res.alpha_fg.data <= res.alpha.data + 1e-9)


def test_composite_occlusion_monotone():
    rng = np.random.default_rng(5)
    s = 16
    sigma = rng.uniform(0.1, 1.0, (1, s))
    t = np.sort(rng.uniform(1, 20, (1, s)), axis=1)
    deltas = np.concatenate([np.diff(t, axis=1), [[5.0]]], axis=1)
    res1 = composite(Tensor(sigma), t, deltas, np.ones((1, s), bool))
    sigma2 = sigma.copy()
    sigma2[0, 0] *= 10
    res2 = composite(Tensor(sigma2), t, deltas, np.ones((1, s), bool))
    assert np.all(res2.weights.data[0, 1:] <= res1.weights.data[0, 1:] + 1e-12)


def test_composite_zero_density_insertion_consistency():
    rng = np.random.default_rng(6)
    s = 12
    with ad.test_mode():
        sigma = rng.uniform(0.1, 1.5, (1, s))
        t = np.sort(rng.uniform(1, 10, (1, s)), axis=1)
        rgb = rng.uniform(0, 1, (1, s, 3))
        sky = np.array([[0.2, 0.4, 0.6]])

        def run(sig, tv, col):
            deltas = np.concatenate([np.diff(tv, axis=1), [[5.0]]], axis=1)
            return composite(Tensor(sig), tv, deltas,
                             np.ones_like(sig, dtype=bool), Tensor(col),
                             Tensor(sky)).color.data

        base = run(sigma, t, rgb)
        # refinement consistency: splitting interval k-1 while keeping its
        # field value leaves the rendered color unchanged
        k = 5
        t_new = np.insert(t, k, (t[0, k - 1] + t[0, k]) / 2, axis=1)
        sig_new = np.insert(sigma, k, sigma[0, k - 1], axis=1)
        rgb_new = np.insert(rgb, k, rgb[0, k - 1], axis=1)
        refined = run(sig_new, t_new, rgb_new)
        np.testing.assert_allclose(refined, base, atol=1e-6)
        # inserting a zero-density sample into an empty span is neutral
        sigma2 = sigma.copy()
        sigma2[0, k - 1] = 0.0
        base2 = run(sigma2, t, rgb)
        sig2_new = np.insert(sigma2, k, 0.0, axis=1)
        refined2 = run(sig2_new, t_new, rgb_new)
        np.testing.assert_allclose(refined2, base2, atol=1e-6)


def test_composite_rejects_unsorted_samples():
    sigma = Tensor(np.ones((1, 3)))
    t = np.array([[3.0, 2.0, 5.0]])
    with pytest.raises(ValueError):
        composite(sigma, t, np.ones((1, 3)), np.ones((1, 3), bool))


def tiny_model_and_renderer(use_3d=True, seed=0):
    cfg = ModelConfig(feature_dim=4, spade_channels=(8, 6, 4), spade_hidden=4,
                      density_width=8, color_width=12, color_layers=3,
                      bg_width=10, sky_hidden=6, pe_levels=2, app_dim=3,
                      n_ref_views=2, use_3d_features=use_3d)
    model = FieldModel(cfg, seed=seed)
    aabb = ForegroundAABB([-4, -4, -4], [4, 4, 4])
    intr = Intrinsics(20.0, 20.0, 12.0, 9.0, 24, 18)
    rng = np.random.default_rng(seed)
    images = [rng.uniform(0, 1, (18, 24, 3)).astype(np.float32)
              for _ in range(3)]
    poses = [pose_at(z=-6.0 + i) for i in range(3)]
    fvol = Tensor(rng.normal(size=(4, 8, 8, 8)).astype(np.float32) * 0.3,
                  requires_grad=True) if use_3d else None
    sampling = SamplingConfig(n_uniform=6, n_importance=6, importance_iters=2,
                              n_background=4, near=0.05, far=100.0,
                              last_delta=5.0)
    r = SceneRenderer(model, aabb, intr, images, poses, sampling,
                      feature_volume=fvol)
    return model, r


def test_render_rays_shapes_and_region_routing():
    model, r = tiny_model_and_renderer()
    rays = camera_rays(r.ref_poses[0], r.intr, np.arange(0, 24 * 18, 37))
    res = r.render_rays(rays, [0, 1], Tensor(np.zeros(3)),
                        np.random.default_rng(0))
    n = len(rays.origins)
    assert res.color.data.shape == (n, 3)
    assert res.weights.data.shape[0] == n
    # every sample is tagged exactly once, fg samples only inside the box
    pts = (rays.origins[:, None]
           + res.tvals[..., None] * rays.dirs[:, None]).reshape(-1, 3)
    inside = r.aabb.contains(pts).reshape(res.fg_mask.shape)
    assert np.all(res.fg_mask <= inside + 1e-9)
    assert np.all(np.diff(res.tvals, axis=1) >= 0)
    assert np.all((res.alpha.data >= 0) & (res.alpha.data <= 1 + 1e-6))


def test_render_rays_deterministic_with_seed():
    model, r = tiny_model_and_renderer()
    rays = camera_rays(r.ref_poses[1], r.intr, np.arange(0, 24 * 18, 53))
    a = r.render_rays(rays, [0, 1], Tensor(np.zeros(3)),
                      np.random.default_rng(7))
    b = r.render_rays(rays, [0, 1], Tensor(np.zeros(3)),
                      np.random.default_rng(7))
    np.testing.assert_array_equal(a.color.data, b.color.data)
    np.testing.assert_array_equal(a.tvals, b.tvals)


def test_render_image_zero_density_equals_sky():
    model, r = tiny_model_and_renderer()
    # force the density head to output (softplus of) -inf ~ 0
    for name, p in model.density.params().items():
        p.data = np.zeros_like(p.data)
        if name.endswith("l1.bias"):
            p.data[:] = -40.0
    for name, p in model.bg.params().items():
        p.data = np.zeros_like(p.data)
        if name.endswith("sigma.bias"):
            p.data[:] = -40.0
    rgb, alpha, depth = r.render_image(r.ref_poses[0], Tensor(np.zeros(3)),
                                       np.random.default_rng(0), chunk=128)
    assert np.abs(alpha).max() < 1e-6
    rays = camera_rays(r.ref_poses[0], r.intr)
    far_pts = rays.origins + r.cfg.far * rays.dirs
    f2d, _ = retrieve_2d(far_pts, r.ref_images, r.ref_poses, r.intr,
                         select_reference_views(r.ref_poses[0], r.ref_poses,
                                                2, exclude=None))
    sky = model.query_sky(rays.dirs, f2d).data.reshape(18, 24, 3)
    np.testing.assert_allclose(rgb, sky, atol=1e-5)


def test_single_opaque_voxel_colors_pixel():
    model, r = tiny_model_and_renderer()
    # a hand-built field: opaque slab at z in [1, 2] inside the box
    class SlabModel:
        cfg = model.cfg

        def query_foreground(self, x, d, fvol, aabb, f2d, app):
            sig = np.where((x[:, 2] >= 1.0) & (x[:, 2] <= 2.0), 50.0, 0.0)
            rgb = np.tile([0.9, 0.1, 0.2], (len(x), 1))
            return Tensor(sig), Tensor(rgb)

        def query_background(self, x, d, aabb, f2d, app):
            return Tensor(np.zeros(len(x))), Tensor(np.zeros((len(x), 3)))

        def query_sky(self, d, f2d):
            return Tensor(np.zeros((len(d), 3)))

        def density_foreground(self, f3d):
            raise NotImplementedError

    r.model = SlabModel()
    r._density = lambda selected: (
        lambda pts, dirs: np.where((pts[:, 2] >= 1.0) & (pts[:, 2] <= 2.0)
                                   & r.aabb.contains(pts), 50.0, 0.0))
    center_pix = np.array([(18 // 2) * 24 + 12])
    rays = camera_rays(pose_at(z=-3.0), r.intr, center_pix)
    res = r.render_rays(rays, [0, 1], Tensor(np.zeros(3)),
                        np.random.default_rng(0))
    np.testing.assert_allclose(res.color.data[0], [0.9, 0.1, 0.2], atol=1e-3)
    # slab front face sits 4m from the camera
    assert res.depth.data[0] == pytest.approx(4.0, abs=0.2)


def test_render_gradients_flow_to_volume_and_heads():
    with ad.test_mode():
        model, r = tiny_model_and_renderer(seed=3)
        # sample positions are data, not differentiated: freeze them by
        # disabling importance resampling for the finite-difference audit
        r.cfg = SamplingConfig(n_uniform=8, n_importance=0,
                               importance_iters=0, n_background=4,
                               near=0.05, far=100.0, last_delta=5.0)
        rays = camera_rays(r.ref_poses[0], r.intr, np.arange(0, 24 * 18, 101))
        params = [("fvol", r.feature_volume)]
        params += list(model.head_parameters().items())
        from scene_oracles import jitter_params
        jitter_params([p for _, p in params[1:]], np.random.default_rng(8))

        def build():
            res = r.render_rays(rays, [0, 1], Tensor(np.zeros(3)),
                                np.random.default_rng(11))
            return (res.color * res.color).sum() + res.alpha_fg.sum()

        err, rec = ad.check_gradients(build, params, samples_per_param=2,
                                      rng=np.random.default_rng(2))
    assert err < 1e-4, rec


def test_ablation_renderer_runs_without_volume():
    model, r = tiny_model_and_renderer(use_3d=False)
    rays = camera_rays(r.ref_poses[2], r.intr, np.arange(0, 24 * 18, 61))
    res = r.render_rays(rays, [0, 1], Tensor(np.zeros(3)),
                        np.random.default_rng(1))
    assert res.color.data.shape == (len(rays.origins), 3)
    assert np.isfinite(res.color.data).all()
