import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from erlhead import tensor as T
from erlhead.fields import FieldConfig, MotionFrame, init_nerf_fields, one_hot
from erlhead.geometry import Intrinsics, generate_rays, pose_to_camera
from erlhead.renderer import HEAD, STATIC, integrate_ray, integrate_rays, render_feature_maps, transmittance
from erlhead.tensor import ParamStore, Tensor
from oracles import quadrature

SMALL = FieldConfig(depth=2, width=16, skip=1, feature_dim=8, pos_freqs=3, dir_freqs=2, cond_freqs=2,
                    deform_depth=2, deform_width=8)


def _frame(seed=0):
    r = np.random.default_rng(seed)
    return MotionFrame(r.normal(size=53), r.normal(0, 0.05, 6), r.normal(0, 0.05, 3), one_hot(1))


def _store(cfg=SMALL, seed=0, zero=False):
    s = ParamStore()
    init_nerf_fields(s, cfg, np.random.default_rng(seed), zero=zero)
    return s


def test_vacuum():
    f, o = integrate_ray(np.linspace(0.1, 0.9, 5), np.zeros(5), np.ones((5, 4)), 1.0)
    assert np.all(f.data == 0) and o.data[0] == 0


def test_single_sample_half_opacity():
    v = np.array([2.0, -4.0, 1.0])
    f, o = integrate_ray([0.0], [math.log(2)], v[None], 1.0)
    assert np.allclose(f.data, 0.5 * v) and np.isclose(o.data[0], 0.5)


def test_constant_medium_n64():
    t = (np.arange(64) + 0.5) / 64
    f, _ = integrate_ray(t, np.ones(64), np.ones((64, 1)), 1.0)
    assert abs(f.data[0] - (1 - math.exp(-1))) < 1e-2


def test_constant_medium_error_shrinks_as_samples_double():
    errs = []
    for n in (8, 16, 32, 64, 128):
        t = (np.arange(n) + 0.5) / n  # bin midpoints, as the sampler places them
        f, _ = integrate_ray(t, np.full(n, 3.0), np.ones((n, 1)), 1.0)
        errs.append(abs(f.data[0] - (1 - math.exp(-3))))
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_matches_loop_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 20))
        depths = np.sort(rng.uniform(0.5, 2.0, n)) + np.arange(n) * 1e-3
        sigma, feats = rng.uniform(0, 4, n), rng.normal(size=(n, 5))
        f, o = integrate_ray(depths, sigma, feats, 2.5)
        want_f, want_o = quadrature(depths, sigma, feats, 2.5)
        assert np.allclose(f.data, want_f, atol=1e-12) and np.isclose(o.data[0], want_o)


def test_non_ascending_depths_rejected():
    with pytest.raises(ValueError, match="ascending"):
        integrate_ray([0.1, 0.1, 0.3], np.ones(3), np.ones((3, 2)), 1.0)
    with pytest.raises(ValueError, match="t_far"):
        integrate_ray([0.1, 0.5, 1.3], np.ones(3), np.ones((3, 2)), 1.0)


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 50)))
def test_transmittance_nonincreasing_and_opacity_bounded(sigma):
    n = len(sigma)
    depths = np.linspace(0.5, 2.0, n + 1)[:-1]
    tr = transmittance(sigma, depths, 2.0)
    assert np.all(np.diff(tr) <= 1e-15) and tr[0] == 1.0 and np.all(tr >= 0) and np.all(tr <= 1)
    _, o = integrate_rays(sigma[None], np.ones((1, n, 1)), depths, 2.0)
    assert 0 <= o.data[0, 0] <= 1 + 1e-12


def test_feature_gradient_wrt_sigma_three_samples(rng):
    depths = np.array([0.7, 1.1, 1.8])
    for _ in range(100):
        feats, w = rng.normal(size=(3, 4)), Tensor(rng.normal(size=4))

        def f(s):
            feat, opac = integrate_ray(depths, s, feats, 2.5)
            return T.sum_(feat * w) + opac[0]

        assert T.gradient_check(f, rng.uniform(0.01, 5, 3), eps=1e-6) < 1e-4


def test_zero_density_field_gives_zero_maps():
    s = _store(zero=True)
    s["head.sigma.b"].data[...] = -60.0  # softplus(-60) ~ 1e-26
    rays = generate_rays(pose_to_camera(np.zeros(6), Intrinsics(focal=8, cx=4, cy=4, height=8, width=8)), 0.5, 2.5)
    maps = render_feature_maps(s, SMALL, rays, _frame(), HEAD, n_samples=8)
    assert np.allclose(maps.feature.data, 0, atol=1e-20) and np.allclose(maps.density.data, 0, atol=1e-20)


def test_full_resolution_shapes():
    cfg = FieldConfig(depth=2, width=8, skip=1, pos_freqs=2, dir_freqs=1, cond_freqs=1, deform_depth=1,
                      deform_width=4)
    rays = generate_rays(pose_to_camera(np.zeros(6)), 0.5, 2.5)
    maps = render_feature_maps(_store(cfg), cfg, rays, _frame(), STATIC, n_samples=4, chunk=2048)
    assert maps.feature.shape == (64, 64, 256) and maps.density.shape == (64, 64, 1)
    assert np.all((maps.density.data >= 0) & (maps.density.data <= 1))


@pytest.mark.parametrize("branch", [HEAD, STATIC])
def test_serial_chunked_and_threaded_agree(branch):
    intr = Intrinsics(focal=12, cx=6, cy=6, height=12, width=12)
    rays = generate_rays(pose_to_camera(np.zeros(6), intr), 0.5, 2.5)
    s = _store(seed=4)
    kw = dict(n_samples=10, stratified=True, seed=3)
    serial = render_feature_maps(s, SMALL, rays, _frame(), branch, **kw)
    chunked = render_feature_maps(s, SMALL, rays, _frame(), branch, chunk=17, **kw)
    threaded = render_feature_maps(s, SMALL, rays, _frame(), branch, chunk=17, workers=3, **kw)
    assert np.array_equal(chunked.feature.data, threaded.feature.data)
    assert np.array_equal(chunked.density.data, threaded.density.data)
    assert np.allclose(serial.feature.data, chunked.feature.data, atol=1e-6)


def test_ray_grid_mismatch_rejected():
    rays = generate_rays(pose_to_camera(np.zeros(6), Intrinsics(focal=4, cx=2, cy=2, height=4, width=4)))
    with pytest.raises(ValueError, match="ray count"):
        render_feature_maps(_store(), SMALL, replace(rays, height=5), _frame(), HEAD, n_samples=4)
    with pytest.raises(ValueError, match="branch"):
        render_feature_maps(_store(), SMALL, rays, _frame(), "torso", n_samples=4)


def test_deform_flag_changes_static_render():
    intr = Intrinsics(focal=6, cx=3, cy=3, height=6, width=6)
    rays = generate_rays(pose_to_camera(np.zeros(6), intr), 0.5, 2.5)
    s = _store(seed=2)
    s["deform.out.w"].data[...] = np.random.default_rng(0).normal(0, 0.5, s["deform.out.w"].shape)
    on = render_feature_maps(s, SMALL, rays, _frame(), STATIC, n_samples=6)
    off = render_feature_maps(s, SMALL, rays, _frame(), STATIC, n_samples=6, deform_enabled=False)
    assert not np.allclose(on.feature.data, off.feature.data)
