import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volact.fields import (ActorModel, FieldConfig, PoseBatch, integrated_pe, one_hot_weights,
                           positional_encoding)
from volact.numcore import Mul, Sum, finite_diff_check, tape_grad
from volact.skeleton import Pose, lbs

from helpers import MICRO_FIELD, bent_pose, micro_model, randomize, random_pose


def test_default_sizes():
    c = FieldConfig()
    assert (c.skinning_layers, c.skinning_width, c.delta_layers, c.delta_width) == (4, 128, 4, 128)
    assert (c.radiance_layers, c.radiance_width, c.ao_layers, c.ao_width) == (8, 256, 1, 128)
    assert (c.pe_degree_coords, c.ipe_degree) == (4, 10)


def test_config_rejects_nonpositive():
    with pytest.raises(ValueError):
        FieldConfig(skinning_width=0)
    with pytest.raises(ValueError):
        FieldConfig(ipe_degree=-1)


def test_layout_of_full_size_model():
    m = ActorModel(FieldConfig(), 3)
    assert m.params["rad.0.W"].shape == (60, 256)
    assert m.params["rad.4.W"].shape == (256 + 60, 256)  # encoded-input skip
    assert m.params["skin.out.W"].shape == (128, 4)
    assert m.params["delta.0.W"].shape == (27 + 36, 128)
    assert m.params["ao.0.W"].shape == (256 + 36, 128)


# -- encodings ----------------------------------------------------------------


def test_pe_at_origin():
    enc = positional_encoding(np.zeros(3), 4)
    assert enc.shape == (27,)
    np.testing.assert_array_equal(enc[:3], 0.0)
    # layout per frequency: sin(3), cos(3)
    feats = enc[3:].reshape(4, 2, 3)
    np.testing.assert_array_equal(feats[:, 0], 0.0)
    np.testing.assert_array_equal(feats[:, 1], 1.0)


def test_pe_degree_zero_is_identity():
    x = np.array([0.3, -0.2, 0.9])
    np.testing.assert_array_equal(positional_encoding(x, 0), x)


def test_pe_frequencies():
    x = np.array([0.3, -0.2, 0.9])
    feats = positional_encoding(x, 3)[3:].reshape(3, 2, 3)
    for l in range(3):
        np.testing.assert_allclose(feats[l, 0], np.sin(2.0**l * x), atol=1e-15)
        np.testing.assert_allclose(feats[l, 1], np.cos(2.0**l * x), atol=1e-15)


def test_ipe_zero_variance_equals_pe_exactly():
    rng = np.random.default_rng(0)
    mu = rng.uniform(-2, 2, (100, 3))
    for L in (1, 4, 10):
        np.testing.assert_array_equal(integrated_pe(mu, np.zeros(3), L), positional_encoding(mu, L)[:, 3:])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(0, 8))
def test_ipe_zero_variance_property(mu, L):
    mu = np.array(mu)
    # the plain encoding leads with x itself; the integrated one has only the frequency bands
    np.testing.assert_array_equal(integrated_pe(mu, np.zeros(3), L), positional_encoding(mu, L)[3:])


def test_ipe_huge_variance_vanishes():
    out = integrated_pe(np.array([0.4, 1.0, -3.0]), np.full(3, 1e6), 5)
    np.testing.assert_allclose(out, 0.0, atol=1e-300)


def test_ipe_accepts_full_covariance():
    mu = np.array([0.1, 0.2, 0.3])
    cov = np.diag([0.01, 0.02, 0.03]) + 0.005
    np.testing.assert_array_equal(integrated_pe(mu, cov, 3), integrated_pe(mu, np.diag(cov), 3))


def test_ipe_rejects_negative_variance():
    with pytest.raises(ValueError):
        integrated_pe(np.zeros(3), np.array([0.0, -1.0, 0.0]), 2)


def test_ipe_magnitude_non_increasing_in_variance():
    rng = np.random.default_rng(1)
    mu = rng.uniform(-1, 1, 3)
    grid = np.linspace(0, 2, 41)
    for axis in range(3):
        mags = []
        for v in grid:
            var = np.full(3, 0.05)
            var[axis] = v
            mags.append(np.abs(integrated_pe(mu, var, 6)))
        mags = np.array(mags)
        assert np.all(np.diff(mags, axis=0) <= 1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_ipe_is_pe_times_damping(mu, var):
    mu, var = np.array(mu), np.array(var)
    L = 4
    got = integrated_pe(mu, var, L).reshape(L, 2, 3)
    for l in range(L):
        damp = np.exp(-0.5 * 4.0**l * var)
        np.testing.assert_allclose(got[l, 0], np.sin(2.0**l * mu) * damp, atol=1e-14)
        np.testing.assert_allclose(got[l, 1], np.cos(2.0**l * mu) * damp, atol=1e-14)


# -- field outputs --------------------------------------------------------------


def test_skinning_on_simplex_and_deterministic():
    model, _ = micro_model()
    randomize(model, np.random.default_rng(2), 2.0)
    x = np.random.default_rng(3).uniform(-1, 1, (1000, 3))
    w = model.eval_skinning(x)
    assert w.shape == (1000, 3)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(model.eval_skinning(x), w)
    # matmul blocking may differ between batch sizes, so single-point agreement is to rounding
    np.testing.assert_allclose(model.eval_skinning(x[5]), w[5], rtol=1e-13, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_skinning_simplex_property(seed, scale):
    rng = np.random.default_rng(seed)
    model, _ = micro_model(int(rng.integers(100)))
    randomize(model, rng, scale)
    w = model.eval_skinning(rng.uniform(-2, 2, (50, 3)))
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)


def test_fresh_delta_is_zero():
    model, sk = micro_model()
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (50, 3))
    np.testing.assert_array_equal(model.eval_delta(x, random_pose(2, rng)), 0.0)


def test_delta_depends_on_pose_once_trained():
    model, sk = micro_model()
    randomize(model, np.random.default_rng(5))
    x = np.random.default_rng(6).uniform(-0.5, 0.5, (10, 3))
    d1 = model.eval_delta(x, bent_pose(sk, 0.2))
    d2 = model.eval_delta(x, bent_pose(sk, 1.2))
    assert np.abs(d1 - d2).max() > 1e-6


def test_radiance_ranges():
    model, _ = micro_model()
    randomize(model, np.random.default_rng(7), 3.0)
    rng = np.random.default_rng(8)
    out = model.eval_radiance(rng.uniform(-2, 2, (1000, 3)), rng.uniform(0, 0.1, (1000, 3)))
    assert np.all((out.c >= 0) & (out.c <= 1))
    assert np.all(out.sigma >= 0)
    assert out.h.shape == (1000, MICRO_FIELD.radiance_width)
    assert np.all(np.isfinite(out.h))


def test_fresh_ao_is_one():
    model, sk = micro_model()
    rng = np.random.default_rng(9)
    h = model.eval_radiance(rng.uniform(-1, 1, (100, 3)), np.zeros(3)).h
    np.testing.assert_allclose(model.eval_ao(h, random_pose(2, rng)), 1.0, atol=1e-6)


def test_ao_range_after_perturbation():
    model, sk = micro_model()
    randomize(model, np.random.default_rng(10), 4.0)
    rng = np.random.default_rng(11)
    h = model.eval_radiance(rng.uniform(-1, 1, (1000, 3)), np.zeros(3)).h
    a = model.eval_ao(h, random_pose(2, rng))
    assert np.all((a > 0) & (a <= 1))
    assert a.min() < 1  # the shading path is active


def test_ao_disabled_returns_ones():
    model, _ = micro_model()
    model.ao_enabled = False
    assert model.eval_ao(np.zeros(32), Pose.identity(2)) == 1.0


# -- forward map -----------------------------------------------------------------


def test_identity_pose_forward_map_is_identity():
    model, _ = micro_model()
    randomize(model, np.random.default_rng(12))
    x = np.random.default_rng(13).uniform(-1, 1, (1000, 3))
    model.delta_enabled = False
    np.testing.assert_allclose(model.forward_map(Pose.identity(2), x), x, atol=1e-12)


def test_fresh_model_identity_pose_is_identity_with_delta():
    model, _ = micro_model()
    x = np.random.default_rng(14).uniform(-1, 1, (100, 3))
    np.testing.assert_allclose(model.forward_map(Pose.identity(2), x), x, atol=1e-12)


def test_one_hot_rigid_forward_map():
    model, sk = micro_model()
    model.delta_enabled = False
    model.skinning_override = one_hot_weights(lambda x: np.zeros(len(x), dtype=int), 2)
    rng = np.random.default_rng(15)
    pose = random_pose(2, rng)
    x = rng.standard_normal((20, 3))
    np.testing.assert_allclose(model.forward_map(pose, x), pose.transforms[0].apply(x), atol=1e-14)


def test_forward_map_matches_lbs_plus_delta():
    model, sk = micro_model()
    randomize(model, np.random.default_rng(16))
    pose = bent_pose(sk, 0.7)
    x = np.random.default_rng(17).uniform(-0.5, 0.5, (30, 3))
    want = lbs(model.eval_skinning(x), pose, x) + model.eval_delta(x, pose)
    np.testing.assert_allclose(model.forward_map(pose, x), want, atol=1e-14)


def test_forward_map_jacobian_matches_finite_differences():
    model, sk = micro_model()
    randomize(model, np.random.default_rng(18))
    pose = bent_pose(sk, 0.9)
    x = np.random.default_rng(19).uniform(-0.5, 0.5, (20, 3))
    xv, J, *_ = model.forward_map_jacobian(PoseBatch.single(pose, 20), x)
    np.testing.assert_allclose(xv, model.forward_map(pose, x), atol=1e-15)
    h = 1e-5
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (model.forward_map(pose, x + e) - model.forward_map(pose, x - e)) / (2 * h)
        err = np.abs(J[:, :, k] - fd) / np.maximum(1.0, np.abs(fd))
        assert err.max() <= 1e-6


def test_pose_batch_indexing_matches_single_pose():
    model, sk = micro_model()
    randomize(model, np.random.default_rng(20))
    poses = [bent_pose(sk, 0.1), bent_pose(sk, 1.0)]
    x = np.random.default_rng(21).uniform(-0.5, 0.5, (6, 3))
    idx = np.array([0, 1, 1, 0, 1, 0])
    got = model.forward_map(PoseBatch(poses, idx), x)
    for i in range(6):
        np.testing.assert_allclose(got[i], model.forward_map(poses[idx[i]], x[i]), atol=1e-15)


def test_params_layout_mismatch_rejected():
    model, _ = micro_model()
    with pytest.raises(ValueError):
        ActorModel(FieldConfig(), 2, params=model.params)


# -- gradients of every network against finite differences -----------------------


def _probe_indices(model, prefix, n, seed):
    idx = np.flatnonzero(model.params.mask(prefix))
    return np.random.default_rng(seed).choice(idx, size=min(n, len(idx)), replace=False)


def _weighted_sum(t, slot, w):
    return t.apply(Sum(), t.apply(Mul(), slot, t.input(w)))


def _check(model, build, prefix, seed, n=40):
    ps = model.params
    err = finite_diff_check(lambda p: tape_grad(build, p)[0], lambda p: tape_grad(build, p)[1], ps,
                            h=1e-5, indices=_probe_indices(model, prefix, n, seed))
    assert err <= 1e-6, err


@pytest.mark.parametrize("seed", range(3))
def test_skinning_gradients(seed):
    model, _ = micro_model(seed)
    randomize(model, np.random.default_rng(seed))
    rng = np.random.default_rng(100 + seed)
    x, w = rng.uniform(-1, 1, (9, 3)), rng.standard_normal((9, 3))
    _check(model, lambda t: _weighted_sum(t, model.skinning_tape(t, t.input(x)), w), "skin.", seed)


@pytest.mark.parametrize("seed", range(3))
def test_delta_gradients(seed):
    from volact.numcore import PosEnc
    model, sk = micro_model(seed)
    randomize(model, np.random.default_rng(seed))
    rng = np.random.default_rng(200 + seed)
    x, w = rng.uniform(-1, 1, (9, 3)), rng.standard_normal((9, 3))
    pb = PoseBatch.single(bent_pose(sk, 0.6), 9)

    def build(t):
        enc = t.apply(PosEnc(model.cfg.pe_degree_coords), t.input(x))
        return _weighted_sum(t, model.delta_tape(t, enc, pb), w)

    _check(model, build, "delta.", seed)


@pytest.mark.parametrize("seed", range(3))
def test_radiance_gradients(seed):
    model, _ = micro_model(seed)
    randomize(model, np.random.default_rng(seed))
    rng = np.random.default_rng(300 + seed)
    x, var = rng.uniform(-1, 1, (9, 3)), rng.uniform(0, 0.05, (9, 3))
    w1, w2 = rng.standard_normal((9, 3)), rng.standard_normal((9, 1))

    def build(t):
        rgb, sig, _ = model.radiance_tape(t, t.input(x), t.input(var))
        return t.apply(Sum(), t.apply(Mul(), t.apply(Sum(), t.apply(Mul(), rgb, t.input(w1))),
                                      t.apply(Sum(), t.apply(Mul(), sig, t.input(w2)))))

    _check(model, build, "rad.", seed, n=60)


@pytest.mark.parametrize("seed", range(3))
def test_ao_gradients(seed):
    model, sk = micro_model(seed)
    randomize(model, np.random.default_rng(seed), 1.0)
    rng = np.random.default_rng(400 + seed)
    x, w = rng.uniform(-1, 1, (9, 3)), rng.standard_normal((9, 1))
    pb = PoseBatch.single(bent_pose(sk, 0.4), 9)

    def build(t):
        _, _, h = model.radiance_tape(t, t.input(x), t.input(np.zeros((9, 3))))
        return _weighted_sum(t, model.ao_tape(t, h, pb), w)

    _check(model, build, "ao.", seed)


def test_forward_map_parameter_gradients():
    model, sk = micro_model(4)
    randomize(model, np.random.default_rng(4))
    rng = np.random.default_rng(500)
    x, w = rng.uniform(-1, 1, (9, 3)), rng.standard_normal((9, 3))
    pb = PoseBatch.single(bent_pose(sk, 0.8), 9)
    build = lambda t: _weighted_sum(t, model.forward_map_tape(t, t.input(x), pb), w)
    _check(model, build, "skin.", 4)
    _check(model, build, "delta.", 5)


def test_tape_replay_is_bit_exact():
    model, sk = micro_model()
    randomize(model, np.random.default_rng(22))
    from volact.numcore import Tape
    t = Tape(model.params)
    x = np.random.default_rng(23).uniform(-1, 1, (7, 3))
    y = model.forward_map_tape(t, t.input(x), PoseBatch.single(bent_pose(sk), 7))
    rgb, sig, h = model.radiance_tape(t, y, t.input(np.full((7, 3), 0.01)))
    vals = t.replay()
    for s in (y, rgb, sig, h):
        np.testing.assert_array_equal(vals[s], t[s])
