import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erlhead import tensor as T
from erlhead.fields import (FieldConfig, MotionFrame, deform_forward, head_field_forward, init_nerf_fields, one_hot,
                            positional_encoding, static_field_forward)
from erlhead.tensor import ParamStore, Tensor

SMALL = FieldConfig(depth=3, width=16, skip=1, feature_dim=8, pos_freqs=3, dir_freqs=2, cond_freqs=2,
                    deform_depth=2, deform_width=8)


def _store(cfg=SMALL, zero=False, seed=0):
    s = ParamStore()
    init_nerf_fields(s, cfg, np.random.default_rng(seed), zero=zero)
    return s


def test_encoding_of_zero():
    enc = positional_encoding(np.zeros(1), 3)
    assert np.array_equal(enc[0::2], np.zeros(3)) and np.array_equal(enc[1::2], np.ones(3))


def test_encoding_of_half():
    assert np.allclose(positional_encoding(np.array([0.5]), 1), [1.0, 0.0], atol=1e-6)


def test_encoding_length():
    assert positional_encoding(np.zeros(3), 10).shape == (60,)


def test_encoding_tensor_matches_numpy(rng):
    x = rng.normal(size=(4, 3))
    assert np.allclose(positional_encoding(Tensor(x), 4).data, positional_encoding(x, 4))


def test_zero_params_give_softplus_zero_density():
    s = _store(zero=True)
    x = np.random.default_rng(0).normal(size=(5, 4, 3))
    d = np.tile([0.0, 0.0, -1.0], (5, 1))
    sig_h, _ = head_field_forward(x, np.ones(53), d, s, SMALL)
    sig_s, _ = static_field_forward(x, d, s, SMALL)
    assert np.allclose(sig_h.data, math.log(2), atol=1e-4)
    assert np.allclose(sig_s.data, math.log(2), atol=1e-4)


def test_single_point_shapes_and_determinism():
    s = _store()
    x, d, z = np.array([0.1, 0.2, -1.4]), np.array([0.0, 0.0, -1.0]), np.linspace(-1, 1, 53)
    a = head_field_forward(x, z, d, s, SMALL)
    b = head_field_forward(x, z, d, s, SMALL)
    assert a[0].shape == (1,) and a[1].shape == (SMALL.feature_dim,)
    assert np.array_equal(a[1].data, b[1].data)


def test_default_feature_width_is_256():
    assert FieldConfig().feature_dim == 256
    s = _store(FieldConfig(depth=2, width=8, skip=1))
    _, f = static_field_forward(np.zeros(3), np.array([0, 0, -1.0]), s, FieldConfig(depth=2, width=8, skip=1))
    assert f.shape == (256,)


def test_fresh_deform_is_identity(rng):
    s = _store()
    out = deform_forward(rng.normal(size=(7, 3)), rng.normal(size=6), rng.normal(size=3), s, SMALL)
    assert out.shape == (7, 3) and np.all(out.data == 0)
    assert deform_forward(np.zeros(3), np.zeros(6), np.zeros(3), s, SMALL).shape == (3,)


def test_deform_gradient_matches_finite_differences(rng):
    s = _store(seed=3).copy(np.float64)
    s["deform.out.w"].data[...] = rng.normal(0, 0.3, s["deform.out.w"].shape)
    x = rng.normal(size=(6, 3))
    pose, jaw = rng.normal(size=6), rng.normal(size=3)

    def loss():
        dx = deform_forward(Tensor(x), pose, jaw, s, SMALL)
        return T.sum_(dx * dx)

    params = [s[n] for n in s.names() if n.startswith("deform")]
    assert T.check_param_grads(loss, params, 40, rng) < 1e-4


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_density_nonnegative_for_any_params(seed, scale):
    s = _store(seed=seed)
    r = np.random.default_rng(seed)
    for _, t in s.items():
        t.data[...] = r.normal(0, scale, t.shape)
    x = r.normal(0, 3, (4, 5, 3))
    d = np.tile([0.0, 0.0, -1.0], (4, 1))
    assert np.all(head_field_forward(x, r.normal(size=53), d, s, SMALL)[0].data >= 0)
    assert np.all(static_field_forward(x, d, s, SMALL)[0].data >= 0)


def test_expression_width_checked():
    with pytest.raises(T.ShapeError):
        head_field_forward(np.zeros(3), np.zeros(10), np.array([0, 0, -1.0]), _store(), SMALL)


def test_motion_frame_validation():
    ok = MotionFrame(np.zeros(53), np.zeros(6), np.zeros(3), one_hot(2))
    assert MotionFrame.from_dict(ok.to_dict()).to_dict() == ok.to_dict()
    with pytest.raises(ValueError, match="expression"):
        MotionFrame(np.zeros(52), np.zeros(6), np.zeros(3), one_hot(0))
    with pytest.raises(ValueError, match="one-hot"):
        MotionFrame(np.zeros(53), np.zeros(6), np.zeros(3), np.ones(5))
    with pytest.raises(ValueError, match="non-finite"):
        MotionFrame(np.zeros(53), [0, 0, 0, np.inf, 0, 0], np.zeros(3), one_hot(0))
