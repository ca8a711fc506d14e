"""Convolution kernels against a literal seven-loop oracle, plus
agreement between the compiled backend and the numpy fallback."""

import numpy as np
import pytest

from volprob import kernels
from volprob.kernels import reference

try:
    from volprob.kernels import _native as native
except ImportError:
    native = None


# ---------------------------------------------------------------------
# oracles: direct loop transcriptions of the definitions
# ---------------------------------------------------------------------

def conv3d_loop(x, w, stride, padding):
    cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.zeros((cin, d + 2 * padding, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + d, padding:padding + h, padding:padding + wd] = x
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((cout, do, ho, wo))
    for co in range(cout):
        for oz in range(do):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for kz in range(k):
                            for ky in range(k):
                                for kx in range(k):
                                    acc += (w[co, ci, kz, ky, kx]
                                            * xp[ci, oz * stride + kz,
                                                 oy * stride + ky,
                                                 ox * stride + kx])
                    out[co, oz, oy, ox] = acc
    return out


def grad_kernel_loop(gout, x, k, stride, padding):
    cin, d, h, wd = x.shape
    cout = gout.shape[0]
    xp = np.zeros((cin, d + 2 * padding, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + d, padding:padding + h, padding:padding + wd] = x
    gw = np.zeros((cout, cin, k, k, k))
    _, do, ho, wo = gout.shape
    for co in range(cout):
        for ci in range(cin):
            for kz in range(k):
                for ky in range(k):
                    for kx in range(k):
                        acc = 0.0
                        for oz in range(do):
                            for oy in range(ho):
                                for ox in range(wo):
                                    acc += (gout[co, oz, oy, ox]
                                            * xp[ci, oz * stride + kz,
                                                 oy * stride + ky,
                                                 ox * stride + kx])
                        gw[co, ci, kz, ky, kx] = acc
    return gw


CONFIGS = [
    (1, 1, 3, 3, 3, 1, 1, 0),
    (2, 3, 4, 5, 6, 3, 1, 1),
    (3, 2, 5, 4, 4, 3, 2, 1),
    (2, 2, 6, 6, 6, 5, 1, 2),
    (1, 4, 4, 4, 7, 3, 3, 0),
    (4, 1, 5, 5, 5, 1, 2, 0),
]


@pytest.mark.parametrize("cin,cout,d,h,w,k,s,p", CONFIGS)
def test_forward_matches_loop_oracle(cin, cout, d, h, w, k, s, p):
    rng = np.random.default_rng(hash((cin, cout, d, h, w, k, s, p)) % 2 ** 31)
    x = rng.normal(size=(cin, d, h, w))
    wt = rng.normal(size=(cout, cin, k, k, k))
    got = kernels.conv3d_forward(x, wt, s, p)
    want = conv3d_loop(x, wt, s, p)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("cin,cout,d,h,w,k,s,p", CONFIGS)
def test_backward_kernel_matches_loop_oracle(cin, cout, d, h, w, k, s, p):
    rng = np.random.default_rng(hash(("gw", cin, cout, d, h, w, k, s, p)) % 2 ** 31)
    x = rng.normal(size=(cin, d, h, w))
    wt = rng.normal(size=(cout, cin, k, k, k))
    gout = rng.normal(size=kernels.conv3d_forward(x, wt, s, p).shape)
    got = kernels.conv3d_backward_kernel(gout, x, k, s, p)
    want = grad_kernel_loop(gout, x, k, s, p)
    np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("cin,cout,d,h,w,k,s,p", CONFIGS)
def test_backward_input_is_adjoint(cin, cout, d, h, w, k, s, p):
    # <gout, conv(x)> must equal <grad_input(gout), x> for any gout
    rng = np.random.default_rng(hash(("adj", cin, cout, d, h, w, k, s, p)) % 2 ** 31)
    x = rng.normal(size=(cin, d, h, w))
    wt = rng.normal(size=(cout, cin, k, k, k))
    y = kernels.conv3d_forward(x, wt, s, p)
    gout = rng.normal(size=y.shape)
    gx = kernels.conv3d_backward_input(gout, wt, x.shape, s, p)
    assert gx.shape == x.shape
    lhs = float((gout * y).sum())
    rhs = float((gx * x).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_backend_attribute():
    assert kernels.BACKEND in ("native", "fallback")


@pytest.mark.skipif(native is None, reason="compiled extension not built")
def test_backends_agree_on_random_configs():
    rng = np.random.default_rng(42)
    for _ in range(40):
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5]))
        s = int(rng.integers(1, 4))
        p = int(rng.integers(0, 3)) if k > 1 else 0
        dims = [int(rng.integers(max(1, k - 2 * p), 8)) for _ in range(3)]
        # output extents must be >= 1
        dims = [max(dim, k - 2 * p) for dim in dims]
        x = rng.normal(size=(cin, *dims))
        wt = rng.normal(size=(cout, cin, k, k, k))
        f_ref = reference.conv3d_forward(x, wt, s, p)
        f_nat = native.conv3d_forward(x, wt, s, p)
        np.testing.assert_allclose(f_nat, f_ref, rtol=1e-12, atol=1e-12)
        gout = rng.normal(size=f_ref.shape)
        np.testing.assert_allclose(
            native.conv3d_backward_input(gout, wt, x.shape, s, p),
            reference.conv3d_backward_input(gout, wt, x.shape, s, p),
            rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(
            native.conv3d_backward_kernel(gout, x, k, s, p),
            reference.conv3d_backward_kernel(gout, x, k, s, p),
            rtol=1e-11, atol=1e-11)


def test_forward_accepts_non_contiguous_input():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 4, 8))[:, :, :, ::2]
    wt = rng.normal(size=(3, 2, 3, 3, 3))
    got = kernels.conv3d_forward(x, wt, 1, 1)
    want = conv3d_loop(np.ascontiguousarray(x), wt, 1, 1)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
