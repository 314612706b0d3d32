import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volact.fields import PoseBatch
from volact.numcore import Transform, rotation_about_axis
from volact.renderer import (
    Camera, Cone, RayBatch, RenderConfig, ShadedSample, cast_cone_samples, composite, composite_backward,
    composite_batch, fill_failures, frustum_gaussians, generate_cone, interpolate_failures, interval_edges,
    merge_argmax, normalize_strategy, query_batch, query_sample, ray_box_interval, render_image, render_rays,
)
from volact.rootfind import ModelDeformer, RootFindConfig, Status, init_candidates_batch, newton_batch
from volact.skeleton import Bone, Pose, Skeleton
from volact.synth import AnalyticActorModel, CapsuleActor, default_cameras, default_render_config, oracle_render
from volact.training import psnr

from helpers import bent_pose, loop_composite, micro_camera, micro_model, randomize


def one_bone_actor():
    return CapsuleActor(Skeleton([Bone([-0.3, 0, 0], [0.3, 0, 0])]), 0.1, 0.04, 50.0, [[0.8, 0.4, 0.2]])


# -- camera and cones --------------------------------------------------------------


def test_principal_pixel_looks_along_optical_axis():
    cam = Camera.look_at([0.3, -2.0, 0.5], [0, 0, 0], [0, 0, 1], 20.0, 9, 9)
    cone = generate_cone(cam, (4, 4))
    axis = -np.array([0.3, -2.0, 0.5]) / np.linalg.norm([0.3, -2.0, 0.5])
    np.testing.assert_allclose(cone.direction, axis, atol=1e-12)
    np.testing.assert_allclose(cone.origin, [0.3, -2.0, 0.5], atol=1e-12)


def test_adjacent_pixel_angle_is_inverse_focal():
    cam = Camera.look_at([0, -3, 0], [0, 0, 0], [0, 0, 1], 200.0, 65, 65)
    a = generate_cone(cam, (32, 32)).direction
    b = generate_cone(cam, (32, 33)).direction
    c = generate_cone(cam, (33, 32)).direction
    for other in (b, c):
        ang = np.arccos(np.clip(a @ other, -1, 1))
        assert abs(ang - 1 / 200.0) < 1e-6


def test_directions_unit_and_radius_convention():
    cam = default_cameras(3, 16, 20)[2]
    o, d, r = cam.pixel_rays()
    assert d.shape == (320, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(r, 2 / np.sqrt(12) / cam.focal)


def test_project_inverts_pixel_rays():
    cam = default_cameras(4, 12, 10)[1]
    rr, cc = np.meshgrid(np.arange(12), np.arange(10), indexing="ij")
    px = np.stack([rr.ravel(), cc.ravel()], 1)
    o, d, _ = cam.pixel_rays(px)
    proj, z = cam.project(o + 1.7 * d)
    np.testing.assert_allclose(proj, px, atol=1e-9)
    assert np.all(z > 0)


def test_camera_validation_and_json():
    with pytest.raises(ValueError):
        Camera(0.0, 1, 1, 2, 2)
    cam = default_cameras(2)[1]
    back = Camera.from_json(cam.to_json())
    np.testing.assert_array_equal(back.pixel_rays()[1], cam.pixel_rays()[1])


def test_generate_cone_rejects_outside_pixel():
    with pytest.raises(ValueError):
        generate_cone(micro_camera(), (8, 0))


# -- samples -------------------------------------------------------------------------


def _cone():
    return Cone(np.array([0.1, -3.0, 0.2]), np.array([0.0, 1.0, 0.0]), 0.01)


@pytest.mark.parametrize("stratified", [False, True])
def test_intervals_tile_near_far(stratified):
    s = cast_cone_samples(_cone(), 2.0, 6.0, 64, stratified, np.random.default_rng(0))
    assert len(s) == 64
    assert s[0].t_near == 2.0 and s[-1].t_far == 6.0
    for a, b in zip(s, s[1:]):
        assert a.t_far == b.t_near
    assert all(x.t_near < x.t_far for x in s)
    assert abs(sum(x.t_far - x.t_near for x in s) - 4.0) < 1e-12


def test_stratified_jitter_is_seeded():
    a = cast_cone_samples(_cone(), 2.0, 6.0, 16, True, np.random.default_rng(3))
    b = cast_cone_samples(_cone(), 2.0, 6.0, 16, True, np.random.default_rng(3))
    c = cast_cone_samples(_cone(), 2.0, 6.0, 16, True, np.random.default_rng(4))
    assert [x.t_near for x in a] == [x.t_near for x in b] != [x.t_near for x in c]
    with pytest.raises(ValueError):
        interval_edges(2.0, 6.0, 16, True, None)


def test_deterministic_means_without_stratification():
    a = cast_cone_samples(_cone(), 2.0, 6.0, 32)
    b = cast_cone_samples(_cone(), 2.0, 6.0, 32)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.mu, y.mu)
        np.testing.assert_array_equal(x.sigma_diag, y.sigma_diag)


def test_zero_radius_cone_on_axis():
    cone = Cone(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0)
    for s in cast_cone_samples(cone, 1.0, 3.0, 8):
        np.testing.assert_array_equal(s.mu[:2], 0.0)
        np.testing.assert_array_equal(s.sigma_diag[:2], 0.0)
        assert s.sigma_diag[2] > 0


def test_cast_rejects_bad_range():
    with pytest.raises(ValueError):
        cast_cone_samples(_cone(), 0.0, 1.0, 4)
    with pytest.raises(ValueError):
        cast_cone_samples(_cone(), 2.0, 1.0, 4)


def test_frustum_moments_match_quadrature():
    # a point in the frustum at depth t lies in a disc of radius r t; volume density ∝ t²
    rng = np.random.default_rng(5)
    for _ in range(20):
        t0 = rng.uniform(0.5, 4)
        t1 = t0 + rng.uniform(0.01, 1.0)
        r = rng.uniform(0.001, 0.05)
        t = np.linspace(t0, t1, 20001)
        w = t**2
        z = np.trapezoid(w, t)
        mean_t = np.trapezoid(w * t, t) / z
        var_t = np.trapezoid(w * (t - mean_t) ** 2, t) / z
        var_r = r**2 * np.trapezoid(w * t**2, t) / z / 4.0
        d = np.array([0.0, 0.0, 1.0])
        mu, var = frustum_gaussians(np.zeros((1, 3)), d[None], np.array([r]), np.array([[t0, t1]]))
        np.testing.assert_allclose(mu[0, 0, 2], mean_t, rtol=1e-7)
        np.testing.assert_allclose(var[0, 0, 2], var_t, rtol=1e-5, atol=1e-14)
        np.testing.assert_allclose(var[0, 0, 0], var_r, rtol=1e-6)


def test_ray_box_interval_slab():
    o = np.array([[0.0, -5.0, 0.0], [3.0, -5.0, 0.0]])
    d = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    t0, t1 = ray_box_interval(o, d, -np.ones(3), np.ones(3))
    np.testing.assert_allclose([t0[0], t1[0]], [4.0, 6.0])
    assert t1[1] < t0[1]


# -- merge and failure filling -------------------------------------------------------------


def test_argmax_prefers_densest_and_ignores_dropped():
    sig = np.array([[0.1, 5.0], [3.0, 1.0], [2.0, 9.0], [0.0, 0.0]])
    keep = np.array([[True, True], [True, True], [True, False], [False, False]])
    assert merge_argmax(sig, keep).tolist() == [1, 0, 0, -1]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_argmax_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    sig = rng.exponential(size=(20, 4))
    keep = rng.random((20, 4)) < 0.7
    np.testing.assert_array_equal(merge_argmax(sig * scale, keep), merge_argmax(sig, keep))


def _shaded(c, sigma, failed, t):
    return ShadedSample(np.full(3, c), sigma, 1.0, np.full(3, c), failed, t, t + 1.0)


def test_no_failures_is_identity():
    s = [_shaded(i * 0.1, i, False, i) for i in range(5)]
    out = interpolate_failures(s, "interp")
    for a, b in zip(s, out):
        np.testing.assert_array_equal(a.c_v, b.c_v)
        assert a.sigma_v == b.sigma_v


def test_midway_failure_takes_mean():
    s = [_shaded(0.2, 2.0, False, 0), _shaded(0.0, 0.0, True, 1), _shaded(0.6, 4.0, False, 2)]
    mid = interpolate_failures(s, "interp")[1]
    np.testing.assert_allclose(mid.c_v, 0.4)
    np.testing.assert_allclose(mid.sigma_v, 3.0)
    np.testing.assert_allclose(mid.x_c, 0.4)


def test_end_runs_copy_nearest_valid():
    s = [_shaded(0, 0, True, 0), _shaded(0, 0, True, 1), _shaded(0.5, 7.0, False, 2), _shaded(0, 0, True, 3)]
    out = interpolate_failures(s, "interpolate")
    assert [o.sigma_v for o in out] == [7.0, 7.0, 7.0, 7.0]


def test_all_failed_renders_background():
    s = [_shaded(0.3, 4.0, True, i) for i in range(4)]
    for strat in ("interp", "zero"):
        out = interpolate_failures(s, strat)
        assert all(o.sigma_v == 0 for o in out)
        C, X, acc = composite(out)
        assert acc == 0 and not C.any()


def test_zero_fill_only_touches_failed():
    s = [_shaded(0.2, 2.0, False, 0), _shaded(0.9, 9.0, True, 1)]
    out = interpolate_failures(s, "ZeroFill")
    assert out[0].sigma_v == 2.0 and out[1].sigma_v == 0.0 and not out[1].c_v.any()


def test_batched_fill_matches_per_ray_loop():
    rng = np.random.default_rng(6)
    R, n = 30, 12
    t = np.sort(rng.uniform(0, 5, (R, n)), axis=1)
    attrs = rng.standard_normal((R, n, 4))
    failed = rng.random((R, n)) < 0.4
    got = fill_failures(t, attrs, failed, "interp")
    for r in range(R):
        valid = np.flatnonzero(~failed[r])
        for i in range(n):
            if not failed[r, i]:
                want = attrs[r, i]
            elif len(valid) == 0:
                want = np.zeros(4)
            else:
                lo, hi = valid[valid < i], valid[valid > i]
                if len(lo) and len(hi):
                    p, q = lo[-1], hi[0]
                    a = (t[r, i] - t[r, p]) / (t[r, q] - t[r, p])
                    want = (1 - a) * attrs[r, p] + a * attrs[r, q]
                else:
                    want = attrs[r, lo[-1] if len(lo) else hi[0]]
            np.testing.assert_allclose(got[r, i], want, atol=1e-14)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        normalize_strategy("nearest")
    with pytest.raises(ValueError):
        RenderConfig(failure_strategy="nearest")


# -- compositing -------------------------------------------------------------------------------


def test_empty_medium():
    out = composite_batch(np.zeros((1, 8)), np.full((1, 8), 0.5), np.ones((1, 8, 3)), np.ones((1, 8, 3)))
    assert out.acc[0] == 0 and not out.color.any() and out.trans[0, -1] == 1.0


def test_opaque_front_sample():
    rgb = np.random.default_rng(7).random((1, 5, 3))
    xc = np.random.default_rng(8).random((1, 5, 3))
    sig = np.array([[1e6, 3.0, 3.0, 3.0, 3.0]])
    out = composite_batch(sig, np.full((1, 5), 0.1), 0.5 * rgb, xc)
    np.testing.assert_allclose(out.color[0], 0.5 * rgb[0, 0], atol=1e-15)
    np.testing.assert_allclose(out.corr[0], xc[0, 0], atol=1e-15)
    assert out.acc[0] == 1.0


def test_homogeneous_medium_closed_form():
    c = np.array([0.3, 0.6, 0.9])
    for sigma in (0.05, 0.5, 2.0):
        samples = [ShadedSample(c, sigma, 1.0, np.zeros(3), False, s.t_near, s.t_far)
                   for s in cast_cone_samples(_cone(), 2.0, 6.0, 256)]
        C, _, _ = composite(samples)
        np.testing.assert_allclose(C, c * (1 - np.exp(-sigma * 4.0)), atol=1e-3)


def test_telescoping_matches_prefix_sum_loop():
    rng = np.random.default_rng(9)
    for _ in range(200):
        n = rng.integers(1, 20)
        sig = rng.exponential(2.0, n)
        dl = rng.uniform(0.01, 0.5, n)
        rgb = rng.random((n, 3))
        out = composite_batch(sig[None], dl[None], rgb[None])
        T = 1.0
        for i in range(n):
            np.testing.assert_allclose(out.trans[0, i], T, rtol=1e-12, atol=1e-300)
            T *= np.exp(-sig[i] * dl[i])
        C, acc = loop_composite(sig, dl, rgb)
        np.testing.assert_allclose(out.color[0], C, atol=1e-12)
        np.testing.assert_allclose(out.acc[0], acc, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weights_nonnegative_and_bounded(seed):
    rng = np.random.default_rng(seed)
    sig = rng.exponential(rng.uniform(0.1, 100), (10, 16)) * (rng.random((10, 16)) < 0.8)
    out = composite_batch(sig, rng.uniform(0.001, 0.3, (10, 16)), rng.random((10, 16, 3)))
    assert np.all(out.weights >= 0)
    assert np.all(out.acc <= 1.0 + 1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ao_never_brightens(seed):
    rng = np.random.default_rng(seed)
    sig = rng.exponential(3.0, (5, 12))
    dl = rng.uniform(0.01, 0.3, (5, 12))
    rgb = rng.random((5, 12, 3))
    ao = rng.uniform(1e-6, 1.0, (5, 12, 1))
    shaded = composite_batch(sig, dl, ao * rgb).color
    plain = composite_batch(sig, dl, rgb).color
    assert np.all(shaded <= plain + 1e-15)


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(10)
    sig = rng.exponential(2.0, (4, 9))
    dl = rng.uniform(0.05, 0.3, (4, 9))
    rgb = rng.random((4, 9, 3))
    g = rng.standard_normal((4, 3))
    comp = composite_batch(sig, dl, rgb)
    gs, gr = composite_backward(comp, sig, dl, rgb, g)
    L = lambda s, c: float((composite_batch(s, dl, c).color * g).sum())
    h = 1e-6
    for r in range(4):
        for i in range(9):
            sp, sm = sig.copy(), sig.copy()
            sp[r, i] += h
            sm[r, i] -= h
            assert abs((L(sp, rgb) - L(sm, rgb)) / (2 * h) - gs[r, i]) < 1e-7
            for k in range(3):
                cp, cm = rgb.copy(), rgb.copy()
                cp[r, i, k] += h
                cm[r, i, k] -= h
                assert abs((L(sig, cp) - L(sig, cm)) / (2 * h) - gr[r, i, k]) < 1e-7


# -- querying ------------------------------------------------------------------------------------


def test_query_single_candidate_passes_through():
    actor = one_bone_actor()
    model = AnalyticActorModel(actor)
    sk = actor.skeleton
    T = Transform(rotation_about_axis([0, 0, 1], 0.4), [0.1, 0.0, -0.05])
    pose = Pose([T])
    x_c = np.array([0.1, 0.05, 0.0])
    s = cast_cone_samples(Cone(T.apply(x_c) - [0, 2, 0], np.array([0.0, 1.0, 0.0]), 0.0), 1.99, 2.01, 1)[0]
    out = query_sample(s, pose, model, sk, RootFindConfig())
    assert not out.failed
    rad = model.eval_radiance(T.inverse().apply(s.mu), s.sigma_diag)
    np.testing.assert_allclose(out.x_c, T.inverse().apply(s.mu), atol=1e-10)
    np.testing.assert_allclose(out.c_v, rad.c[0])
    np.testing.assert_allclose(out.sigma_v, rad.sigma[0])


def test_argmax_winner_matches_brute_force_over_all_inits():
    model, sk = micro_model(11)
    randomize(model, np.random.default_rng(11), 0.8)
    pose = bent_pose(sk, 1.3)
    cfg = RootFindConfig(K=sk.B)
    rng = np.random.default_rng(12)
    mu = rng.uniform(-0.35, 0.35, (60, 3))
    var = rng.uniform(0, 1e-3, (60, 3))
    pb = PoseBatch([pose], np.zeros(60, int))
    q = query_batch(model, sk, pb, mu, var, cfg, ao_enabled=False)
    x0, _ = init_candidates_batch(mu, sk, pb, cfg)
    checked = 0
    for n in range(60):
        best, best_sigma = None, -np.inf
        for j in range(x0.shape[1]):
            r = newton_batch(ModelDeformer(model, pb), mu[n:n + 1], x0[n, j:j + 1], np.array([n]), cfg)
            if r.status[0] != Status.CONVERGED:
                continue
            s = model.eval_radiance(r.x[0], var[n]).sigma
            if s > best_sigma:
                best, best_sigma = r.x[0], s
        if best is None:
            assert q.failed[n]
            continue
        checked += 1
        assert not q.failed[n]
        # both roots satisfy the tolerance, so densities agree to first order in tol
        np.testing.assert_allclose(q.sigma[n], best_sigma, rtol=1e-4)
        np.testing.assert_allclose(q.x_c[n], best, atol=1e-4)
    assert checked > 30


# -- full renders ----------------------------------------------------------------------------------


def test_analytic_one_bone_scene_reproduces_oracle():
    actor = one_bone_actor()
    cam = default_cameras(1)[0]
    cfg = default_render_config(ao_enabled=False, delta_enabled=False)
    pose = Pose.identity(1)
    out = render_image(cam, pose, AnalyticActorModel(actor), actor.skeleton, cfg)
    ref = oracle_render(cam, actor, pose, cfg)
    assert psnr(out.color, ref.color) >= 40.0
    assert 0.0 <= out.stats["failure_fraction"] <= 1.0
    assert np.all((out.acc >= 0) & (out.acc <= 1))


def test_correspondence_on_rigid_scene():
    actor = one_bone_actor()
    cam = default_cameras(1)[0]
    cfg = default_render_config(ao_enabled=False, delta_enabled=False)
    T = Transform(rotation_about_axis([0, 0, 1], 0.7), [0.1, -0.05, 0.1])
    out = render_image(cam, Pose([T]), AnalyticActorModel(actor), actor.skeleton, cfg)
    ref = oracle_render(cam, actor, Pose([T]), cfg)
    fg = out.acc > 0.9
    assert fg.sum() > 100
    # X(r) carries the accumulated opacity; normalise it to a point before comparing
    x = out.corr[fg] / out.acc[fg, None]
    err = np.linalg.norm(x - T.inverse().apply(ref.surface[fg]), axis=1)
    voxel = (cfg.far - cfg.near) / cfg.n_samples
    assert err.max() <= 2 * voxel


def test_render_is_deterministic_and_reports_stats():
    model, sk = micro_model(13)
    randomize(model, np.random.default_rng(13))
    cam = micro_camera()
    cfg = RenderConfig(near=0.8, far=2.8, n_samples=8, stratified=True, seed=5)
    a = render_image(cam, bent_pose(sk), model, sk, cfg)
    b = render_image(cam, bent_pose(sk), model, sk, cfg)
    np.testing.assert_array_equal(a.color, b.color)
    np.testing.assert_array_equal(a.corr, b.corr)
    assert a.stats == b.stats
    assert 0 <= a.stats["failure_fraction"] <= 1
    assert a.stats["mean_newton_iters"] >= 0


def test_disabling_ao_never_darkens_image():
    model, sk = micro_model(14)
    randomize(model, np.random.default_rng(14), 1.0)
    cam = micro_camera()
    cfg = RenderConfig(near=0.8, far=2.8, n_samples=8, bbox_clip=False)
    on = render_image(cam, bent_pose(sk), model, sk, cfg)
    off = render_image(cam, bent_pose(sk), model, sk, RenderConfig(**{**vars(cfg), "ao_enabled": False}))
    assert np.all(off.color >= on.color - 1e-15)
    assert (off.color > on.color).any()


def test_rays_missing_the_box_are_background():
    model, sk = micro_model(15)
    rays = RayBatch(np.array([[5.0, 5.0, 5.0]]), np.array([[1.0, 0, 0]]), np.array([0.001]), np.zeros(1, int))
    out = render_rays(model, sk, PoseBatch([Pose.identity(2)]), rays, RenderConfig(near=0.1, far=3.0),
                      RootFindConfig())
    assert out.acc[0] == 0 and out.n_samples == 0
