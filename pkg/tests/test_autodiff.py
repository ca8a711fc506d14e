"""Gradient checks for every primitive against central finite
differences, plus graph semantics: determinism, broadcast rules,
and error paths. A deliberately corrupted gradient must fail."""

import math

import numpy as np
import pytest

import volprob.autodiff as ad
from volprob.autodiff import Tensor
from volprob.errors import ShapeError, UsageError


def rand(shape, seed, lo=-2.0, hi=2.0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, size=shape),
                  requires_grad=True)


def check(f, *points, tol=1e-4):
    report = ad.grad_check(f, list(points), tol=tol)
    assert report.passed, str(report)


# ---------------------------------------------------------------------
# primitive gradients vs finite differences
# ---------------------------------------------------------------------

def test_binary_op_gradients():
    a = rand((3, 4), 0)
    b = rand((3, 4), 1)
    check(lambda x, y: ad.sum_all(ad.add(x, y)), a, b)
    check(lambda x, y: ad.sum_all(ad.sub(x, y)), a, b)
    check(lambda x, y: ad.sum_all(ad.mul(x, y)), a, b)
    denom = rand((3, 4), 2, lo=0.5, hi=2.0)
    check(lambda x, y: ad.sum_all(ad.div(x, y)), a, denom)


def test_scalar_broadcast_gradients():
    a = rand((2, 5), 3)
    s = rand((), 4, lo=0.5, hi=1.5)
    check(lambda x, y: ad.sum_all(ad.mul(x, y)), a, s)
    check(lambda x, y: ad.sum_all(ad.div(x, y)), a, s)
    check(lambda x, y: ad.sum_all(ad.add(y, x)), a, s)


def test_unary_op_gradients():
    a = rand((4, 3), 5)
    check(lambda x: ad.sum_all(ad.neg(x)), a)
    check(lambda x: ad.sum_all(ad.exp(x)), a)
    check(lambda x: ad.sum_all(ad.tanh(x)), a)
    check(lambda x: ad.sum_all(ad.sigmoid(x)), a)
    check(lambda x: ad.sum_all(ad.softplus(x)), a)
    pos = rand((4, 3), 6, lo=0.2, hi=3.0)
    check(lambda x: ad.sum_all(ad.log(x)), pos)
    check(lambda x: ad.sum_all(ad.sqrt(x)), pos)
    # keep absolute/relu away from their kinks
    off = rand((4, 3), 7, lo=0.3, hi=2.0)
    check(lambda x: ad.sum_all(ad.absolute(x)), off)
    check(lambda x: ad.sum_all(ad.relu(x)), off)


def test_clamp_gradient_inside_and_outside():
    a = Tensor(np.array([-3.0, -0.5, 0.4, 2.5]), requires_grad=True)
    out = ad.sum_all(ad.clamp(a, -1.0, 1.0))
    ad.backward(out)
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 1.0, 0.0])


def test_reduction_and_dot_gradients():
    a = rand((6,), 8)
    b = rand((6,), 9)
    check(lambda x: ad.reduce(x, "sum"), a)
    check(lambda x: ad.reduce(x, "mean"), a)
    check(lambda x, y: ad.dot(x, y), a, b)


def test_structural_op_gradients():
    feats = rand((2, 2, 2, 2), 10)
    more = rand((3, 2, 2, 2), 11)
    z = rand((3,), 12)
    check(lambda x, y: ad.sum_all(ad.mul(ad.concat_channels(x, y),
                                         ad.concat_channels(x, y))), feats, more)
    check(lambda v: ad.sum_all(ad.mul(ad.broadcast_latent(v, (2, 2, 2)),
                                      Tensor(np.arange(24.0).reshape(3, 2, 2, 2)))), z)
    check(lambda x: ad.sum_all(ad.mul(ad.global_avg_pool(x), rand((2,), 19).detach())), feats)
    vol = rand((2, 4, 4, 4), 13)
    check(lambda x: ad.sum_all(ad.mul(ad.rescale_spatial(x, "down", 2),
                                      rand((2, 2, 2, 2), 14).detach())), vol)
    small = rand((2, 2, 2, 2), 15)
    check(lambda x: ad.sum_all(ad.mul(ad.rescale_spatial(x, "up", 2),
                                      rand((2, 4, 4, 4), 16).detach())), small)


def test_affine_gradients():
    x = rand((5,), 17)
    w = rand((3, 5), 18)
    b = rand((3,), 19)
    check(lambda xx, ww, bb: ad.sum_all(ad.affine(xx, ww, bb)), x, w, b)


def test_conv3d_gradients():
    x = rand((2, 3, 4, 4), 20)
    w = rand((3, 2, 3, 3, 3), 21)
    b = rand((3,), 22)
    check(lambda xx, ww, bb: ad.sum_all(ad.conv3d(xx, ww, bb, stride=1, padding=1)),
          x, w, b)
    check(lambda xx, ww: ad.sum_all(ad.conv3d(xx, ww, None, stride=2, padding=0)),
          x, w)


def test_bce_gradient_and_value():
    logits = rand((1, 2, 2, 2), 23)
    targets = (np.random.default_rng(24).random((1, 2, 2, 2)) > 0.5).astype(np.float64)
    check(lambda l: ad.bce_with_logits_sum(l, targets), logits)
    # value against the numerically stable closed form
    z = logits.data
    want = float(np.sum(np.logaddexp(0.0, z) - z * targets))
    got = ad.bce_with_logits_sum(logits, targets).item()
    assert math.isclose(got, want, rel_tol=1e-12)


def test_activation_dispatcher():
    a = rand((3,), 25)
    for kind in ("relu", "sigmoid", "tanh", "softplus"):
        out = ad.activation(a, kind)
        assert out.shape == a.shape
    with pytest.raises(UsageError):
        ad.activation(a, "swish")


def test_softplus_value_frozen():
    got = ad.softplus(Tensor(np.array(5.0))).item()
    assert math.isclose(got, math.log(1.0 + math.exp(5.0)), rel_tol=1e-15)


def test_sigmoid_extreme_values_stay_stable():
    z = Tensor(np.array([-800.0, 800.0]))
    out = ad.sigmoid(z).data
    assert np.all(np.isfinite(out))
    assert out[0] >= 0.0 and out[1] <= 1.0


# ---------------------------------------------------------------------
# graph semantics
# ---------------------------------------------------------------------

def test_negative_control_wrong_gradient_fails():
    def bad_square(t):
        # deliberately wrong factor in the backward rule
        def backprop(g):
            return (3.0 * g * t.data,)

        return ad._make(t.data ** 2, (t,), backprop)

    a = rand((4,), 26)
    report = ad.grad_check(lambda x: ad.sum_all(bad_square(x)), a)
    assert not report.passed
    assert report.max_rel_err > 0.1


def test_backward_is_bit_identical_across_repeats():
    a = rand((8,), 27)
    b = rand((8,), 28)

    def run():
        out = ad.sum_all(ad.mul(ad.tanh(a), ad.exp(ad.mul(a, b))))
        ad.backward(out)
        return a.grad.copy(), b.grad.copy()

    ga1, gb1 = run()
    ga2, gb2 = run()
    assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


def test_gradient_accumulates_over_shared_subexpression():
    a = Tensor(np.array([2.0]), requires_grad=True)
    out = ad.sum_all(ad.add(ad.mul(a, a), a))  # d/da (a^2 + a) = 2a + 1
    ad.backward(out)
    np.testing.assert_allclose(a.grad, [5.0], rtol=1e-15)


def test_backward_requires_scalar_root():
    a = rand((3,), 29)
    with pytest.raises(UsageError):
        ad.backward(ad.mul(a, a))


def test_no_grad_skips_graph_construction():
    a = rand((3,), 30)
    with ad.no_grad():
        out = ad.mul(a, a)
    assert not out.requires_grad
    out2 = ad.mul(a, a)  # graph is back on after the context exits
    assert out2.requires_grad


def test_shape_errors():
    a = rand((3, 4), 31)
    b = rand((4, 3), 32)
    with pytest.raises(ShapeError):
        ad.add(a, b)
    with pytest.raises(ShapeError):
        ad.dot(rand((3,), 33), rand((4,), 34))
    with pytest.raises(UsageError):
        ad.clamp(a, 2.0, 1.0)


def test_conv3d_validation():
    x = rand((2, 4, 4, 4), 35)
    with pytest.raises(UsageError):  # even kernel extent
        ad.conv3d(x, rand((1, 2, 2, 2, 2), 36), None)
    with pytest.raises(ShapeError):  # channel mismatch
        ad.conv3d(x, rand((1, 3, 3, 3, 3), 37), None)
    with pytest.raises(ShapeError):  # output extent would be < 1 on some axis
        ad.conv3d(rand((1, 1, 4, 4), 38), rand((1, 1, 3, 3, 3), 39), None, padding=0)


def test_rescale_divisibility_error_names_axis():
    a = rand((1, 4, 5, 4), 40)
    with pytest.raises(ShapeError) as err:
        ad.rescale_spatial(a, "down", 2)
    assert "height" in str(err.value) and "divisible" in str(err.value)


def test_grad_check_report_fields():
    a = rand((3,), 41)
    report = ad.grad_check(lambda x: ad.sum_all(ad.tanh(x)), a)
    assert report.passed
    assert report.n_entries == 3
    assert report.tol == 1e-4
    assert "pass" in str(report)
