"""Compiled and numpy kernel paths must agree (bit-exact for the discrete kernels)."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nrvm import _accel, kernels

pytestmark = pytest.mark.skipif(kernels._splat_nb is None, reason="numba not installed")


@given(arrays(np.float64, (6, 8), elements=st.floats(-3, 3)), st.floats(-2, 2), st.floats(-2, 2))
def test_splat_backends_agree(disp, du, dv):
    src = np.random.default_rng(0).uniform(0, 1, (6, 8, 3))
    a = kernels._splat_nb(src, disp, du, dv)
    b = kernels._splat_np(src, disp, du, dv)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_nearest_valid_backends_agree(holes):
    holes = np.ascontiguousarray(holes)
    a = kernels._nearest_valid_nb(holes)
    b = kernels._nearest_valid_np(holes)
    if holes.all():
        assert (a[holes] == -1).all() and (b[holes] == -1).all()
    else:
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (5, 2)])
def test_im2col_col2im_backends_agree(k, stride, rng):
    xp = rng.normal(size=(2, 11, 9, 3))
    ho, wo = (11 - k) // stride + 1, (9 - k) // stride + 1
    a = kernels._im2col_nb(xp, k, stride, ho, wo)
    np.testing.assert_array_equal(a, kernels._im2col_np(xp, k, stride, ho, wo))
    cols = rng.normal(size=a.shape)
    np.testing.assert_allclose(
        kernels._col2im_nb(cols, 2, 11, 9, 3, k, stride, ho, wo),
        kernels._col2im_np(cols, 2, 11, 9, 3, k, stride, ho, wo),
        rtol=1e-12,
        atol=1e-12,
    )


def test_col2im_is_adjoint_of_im2col(rng):
    # <im2col(x), c> == <x, col2im(c)>
    xp = rng.normal(size=(1, 8, 8, 2))
    cols = kernels.im2col(xp, 3, 2, 3, 3)
    c = rng.normal(size=cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(xp * kernels.col2im(c, 1, 8, 8, 2, 3, 2, 3, 3))
    assert abs(lhs - rhs) < 1e-10


@given(st.integers(0, 2**31), st.floats(0.001, 0.2))
def test_balance_backends_agree(seed, eps):
    r = np.random.default_rng(seed)
    d = np.sort(r.exponential(0.3, size=300))
    xi = r.uniform(0, 1, size=2000)
    outs = []
    for fn in (kernels._balance_nb, kernels._balance_loop):
        n = d.size
        nxt = np.arange(n + 2)
        prv = np.arange(n + 2)
        out = np.full(100, -1, dtype=np.int64)
        res = fn(d, xi, eps, nxt, prv, out, 0, 100, 0, 50)
        outs.append((res, out))
    assert outs[0][0] == outs[1][0]
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_balance_never_reuses_and_respects_epsilon():
    r = np.random.default_rng(5)
    d = np.sort(r.uniform(0, 1, 500))
    xi = r.uniform(0, 1, 5000)
    n = d.size
    out = np.full(200, -1, dtype=np.int64)
    n_sel, _, used = kernels.balance_draws(d, xi, 0.01, np.arange(n + 2), np.arange(n + 2), out, 0, 200, 0, 1000)
    sel = out[:n_sel]
    assert n_sel == 200 and len(set(sel.tolist())) == 200
    # replay the accepted draws: each pick is within epsilon of some draw
    assert used <= xi.size


@given(arrays(np.float64, (3, 4), elements=st.floats(-1, 1)), st.sampled_from([4, 8]))
def test_accumulate_windows_backends_agree(values, stride):
    h, w = (values.shape[0] - 1) * stride + 8, (values.shape[1] - 1) * stride + 8
    a = kernels._accumulate_windows_nb(values, h, w, stride, 8)
    b = kernels._accumulate_windows_np(values, h, w, stride, 8)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_array_equal(a[1], b[1])


def test_backend_flag_binding():
    expected = "numba" if _accel.USE_NUMBA else "numpy"
    assert _accel.backend() == expected
    assert (kernels.splat is kernels._splat_nb) == _accel.USE_NUMBA
