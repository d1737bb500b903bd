import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from erlhead import tensor as T
from erlhead.gradcheck import check_op, op_cases
from erlhead.tensor import ParamStore, Tensor


def test_add_example():
    assert np.array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_matmul_of_ones():
    out = Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 2)))
    assert out.shape == (2, 2)
    assert np.all(out.data == 3.0)


def test_softplus_at_zero_is_ln2():
    assert abs(T.softplus(Tensor(np.zeros(1))).item() - math.log(2)) < 1e-4


def test_softplus_and_sigmoid_stable_for_large_inputs():
    x = Tensor(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(T.softplus(x).data))
    assert np.allclose(T.sigmoid(x).data, [0.0, 0.5, 1.0])


def test_product_rule():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = Tensor(np.array(3.0), requires_grad=True)
    T.backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.backward(T.sum_(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_gradient_accumulates_over_reused_nodes():
    x = Tensor(np.array(1.5), requires_grad=True)
    y = x * x
    T.backward(y + y * x)  # 2x + 3x^2
    assert x.grad == pytest.approx(2 * 1.5 + 3 * 1.5 ** 2)


def test_mean_relu_mlp_matches_finite_differences(rng):
    w = rng.normal(size=(5, 4))
    x = rng.normal(size=(4,))
    assert T.gradient_check(lambda wt: T.mean(T.relu(wt @ Tensor(x))), w, eps=1e-3) < 1e-4


def test_gradient_check_on_quadratic_is_exact():
    assert T.gradient_check(lambda x: x * x, np.array([3.0]), eps=1e-3) < 1e-6


def test_gradient_check_composed_mlp(rng):
    w1, w2 = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(8, 1)))

    def f(x):
        return T.sum_(T.tanh(T.softplus(x @ w1) @ w2))

    assert T.gradient_check(f, rng.normal(size=(4, 3))) < 1e-4


def test_stop_gradient_times_x_has_grad_x():
    # d/dx [sg(x) * x] = sg(x) = x, not 2x. Finite differences see x^2 and
    # report 2x, so the analytic value is checked by hand.
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    T.backward(T.sum_(T.stop_gradient(x) * x))
    assert np.array_equal(x.grad, x.data)


def test_stop_gradient_forward_value_and_zero_upstream(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = T.stop_gradient(x)
    assert np.array_equal(y.data, x.data)
    T.backward(T.sum_(y * 2.0 + x))
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_is_bitwise_deterministic(rng):
    w = rng.normal(size=(6, 6))
    x = rng.normal(size=(10, 6))

    def grads():
        wt = Tensor(w.copy(), requires_grad=True)
        T.backward(T.mean(T.softmax(T.relu(Tensor(x) @ wt), axis=-1) ** 2))
        return wt.grad

    assert grads().tobytes() == grads().tobytes()


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
def test_every_op_matches_finite_differences_on_100_inputs(name):
    assert check_op(name, np.random.default_rng(zlib.crc32(name.encode())), trials=100) < 1e-4


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as err:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    assert "matmul" in str(err.value) and "(2, 3)" in str(err.value)
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradient_check_reports_nonfinite_index():
    with pytest.raises(FloatingPointError, match="index"):
        T.gradient_check(lambda x: T.sum_(T.log(x)), np.array([1.0, 1e-7, 2.0]), eps=1e-3)


def test_float64_preserved_and_python_scalars_default_to_float32():
    assert Tensor(np.ones(2)).dtype == np.float64
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert (Tensor(np.ones(2)) * 3.0).dtype == np.float64


def test_exclusive_cumsum():
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    assert np.array_equal(T.cumsum(x, axis=1, exclusive=True).data, [[0.0, 1.0, 3.0]])


def test_reflect_pad_matches_numpy(rng):
    x = rng.normal(size=(5, 4, 2))
    assert np.array_equal(T.pad2d(Tensor(x), 2, "reflect").data, np.pad(x, [(2, 2), (2, 2), (0, 0)], mode="reflect"))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.allclose(out.sum(axis=-1), 1.0) and np.all(out >= 0)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30, allow_nan=False)))
def test_relu_and_softplus_nonnegative(x):
    assert np.all(T.relu(Tensor(x)).data >= 0)
    assert np.all(T.softplus(Tensor(x)).data >= 0)


# ---------------------------------------------------------------- ParamStore
def test_paramstore_duplicate_and_freeze():
    s = ParamStore()
    s.add("a", np.ones(3))
    s.add("b", np.zeros(2), trainable=False)
    with pytest.raises(KeyError):
        s.add("a", np.ones(1))
    assert s.trainable_names() == ["a"]
    assert set(s.m) == {"a"}
    s.freeze()
    assert s.frozen and not s.m and not s["a"].requires_grad


def test_paramstore_digest_tracks_values():
    s = ParamStore()
    s.add("layer.w", np.ones((2, 2)))
    s.add("other", np.ones(2))
    d0, dp = s.digest(), s.digest("layer.")
    s["other"].data[0] = 5
    assert s.digest() != d0 and s.digest("layer.") == dp


def test_check_param_grads_restores_parameters(rng):
    s = ParamStore()
    w = s.add("w", rng.normal(size=(3, 3)), dtype=np.float64)
    before = w.data.copy()
    x = Tensor(rng.normal(size=(3,)))
    err = T.check_param_grads(lambda: T.sum_(T.tanh(w @ x)), [w], 9, rng)
    assert err < 1e-6 and np.array_equal(w.data, before)
