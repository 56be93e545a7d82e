import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adares.autodiff import Tape, Tensor, grad_check
from adares.autodiff import tensor as tn
from adares.autodiff.nn import BatchNorm1d, ResConv1D, resconv_param_count
from adares.gradchecks import OP_TOL, check_ops

finite = st.floats(-5, 5, allow_nan=False)


def backward(f, *xs):
    for x in xs:
        x.grad = None
    with Tape() as tape:
        out = f(*xs)
    tape.backward(out)
    return out


def test_sigmoid_value_and_slope_at_zero():
    x = Tensor([0.0], requires_grad=True)
    out = backward(lambda a: tn.sum_(tn.sigmoid(a)), x)
    assert out.item() == 0.5
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 9))
    w = np.array([[[0.0, 1.0, 0.0]]])
    out = tn.conv1d(Tensor(x), Tensor(w))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 8)), rng.standard_normal((4, 3, 5)), rng.standard_normal(4)
    out = tn.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.zeros((2, 4, 8))
    for n in range(2):
        for o in range(4):
            for t in range(8):
                ref[n, o, t] = b[o] + np.sum(w[o] * xp[n, :, t:t + 5])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_cumsum_running_sum():
    np.testing.assert_array_equal(tn.cumsum(Tensor([0.5] * 4)).data, [0.5, 1.0, 1.5, 2.0])


def test_mean_gradient_is_one_over_n():
    x = Tensor(np.arange(5.0), requires_grad=True)
    backward(lambda a: tn.mean(a), x)
    np.testing.assert_allclose(x.grad, 0.2)


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    backward(lambda a: tn.sum_(a + a), x)
    assert x.grad[0] == 2.0


def test_max_tie_goes_to_lowest_index():
    x = Tensor([1.0, 4.0, 4.0, 2.0], requires_grad=True)
    backward(lambda a: tn.max_(a), x)
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])


def test_max_axis_tie_lowest_index():
    x = Tensor([[2.0, 2.0], [1.0, 3.0]], requires_grad=True)
    backward(lambda a: tn.sum_(tn.max_(a, axis=1)), x)
    np.testing.assert_array_equal(x.grad, [[1, 0], [0, 1]])


def test_backward_twice_raises():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = tn.sum_(x * 2.0)
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)
    tape.reset()


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_non_parameter_leaves_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    backward(lambda a: tn.sum_(a * c), x)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert tn.current_tape() is None
    assert y.data[0] == 2.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_output_raises():
    with pytest.raises(FloatingPointError):
        tn.log(Tensor([0.0]))


def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(2)
    x = Tensor(3.0 + 2.0 * rng.standard_normal((16, 4, 10)))
    bn = BatchNorm1d(4)
    y = bn(x).data
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 2)), 1.0, atol=1e-4)  # eps=1e-5 shrinks var slightly
    assert np.all(bn.running_mean != 0)


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm1d(2).eval()
    bn.running_mean[:] = [1.0, -1.0]
    bn.running_var[:] = [4.0, 1.0]
    y = bn(Tensor([[3.0, 0.0]])).data
    np.testing.assert_allclose(y, [[2.0 / np.sqrt(4 + 1e-5), 1.0 / np.sqrt(1 + 1e-5)]])


def test_grad_check_linear_is_exact():
    x = Tensor(np.random.default_rng(3).standard_normal(6))
    assert grad_check(lambda a: tn.sum_(a), x) < 1e-10


def test_grad_check_square():
    x = Tensor(np.random.default_rng(4).standard_normal(6))
    assert grad_check(lambda a: tn.sum_(a * a), x) < 1e-8


def test_random_three_op_graph():
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(0.5, 1.5, 5))
    w = rng.standard_normal(5)
    assert grad_check(lambda a: tn.sum_(tn.exp(tn.sigmoid(a) * w) / a), x) < 1e-6


@pytest.mark.parametrize("name,res", sorted(check_ops(seed=11).items()))
def test_each_op_vjp_matches_finite_differences(name, res):
    assert res["error"] < OP_TOL, name


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_grad_shapes(a, b):
    A, B = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    backward(lambda x, y: tn.sum_(x + y), A, B)
    np.testing.assert_array_equal(A.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(B.grad, np.full(4, 3.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_cumsum_vjp_is_reverse_cumsum(a):
    x = Tensor(a, requires_grad=True)
    w = np.arange(1.0, len(a) + 1)
    backward(lambda v: tn.sum_(tn.cumsum(v) * w), x)
    np.testing.assert_allclose(x.grad, np.cumsum(w[::-1])[::-1])


def test_resconv_param_count_formula():
    rng = np.random.default_rng(0)
    for cin, cout in [(128, 64), (8, 1), (4, 4)]:
        assert ResConv1D(cin, cout, rng).num_parameters() == resconv_param_count(cin, cout)


def test_resconv_keeps_length():
    block = ResConv1D(3, 5, np.random.default_rng(0))
    assert block(Tensor(np.ones((2, 3, 11)))).shape == (2, 5, 11)


def test_state_dict_round_trip():
    a = ResConv1D(2, 3, np.random.default_rng(0))
    b = ResConv1D(2, 3, np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for (k1, v1), (k2, v2) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items())):
        assert k1 == k2
        np.testing.assert_array_equal(v1, v2)
    with pytest.raises(KeyError):
        b.load_state_dict({})
