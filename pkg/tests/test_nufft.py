import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from ncssdu import _gridding, nufft
from conftest import crandn, rel


def test_oversampled_grid_size():
    p = nufft.plan((64, 64), np.zeros((1, 2)), oversampling=2.0)
    assert p.oversampled == (128, 128)
    p = nufft.plan((15, 20), np.zeros((1, 2)), oversampling=1.5)
    assert p.oversampled == (24, 30)


def test_beta_closed_form():
    # pi * sqrt((6/2)^2 (2 - 0.5)^2 - 0.8) = pi * sqrt(19.45)
    assert_allclose(nufft.kb_beta(6, 2.0), math.pi * math.sqrt(19.45), rtol=1e-15)
    assert nufft.plan((8, 8), np.zeros((1, 2))).kernel_beta == nufft.kb_beta(6, 2.0)


def test_kernel_transform_matches_quadrature():
    width, beta = 6, nufft.kb_beta(6, 2.0)
    for nu in (0.0, 0.05, 0.1, 0.2, 0.25):
        val, _ = quad(lambda t: nufft.kb_kernel(np.array([t]), width, beta)[0]
                      * math.cos(2 * math.pi * nu * t), -3, 3, limit=200)
        assert_allclose(nufft.kb_kernel_ft(np.array([nu]), width, beta)[0], val, rtol=1e-9)


def test_plan_is_deterministic_and_immutable():
    k = np.random.default_rng(0).uniform(-np.pi, np.pi, (20, 2))
    a, b = nufft.plan((16, 16), k), nufft.plan((16, 16), k)
    assert a.apodization.tobytes() == b.apodization.tobytes()
    assert np.all(a.apodization > 0)
    assert a.table.size >= 2**12
    with pytest.raises(ValueError):
        a.apodization[0, 0] = 1.0


@pytest.mark.parametrize("kwargs", [dict(oversampling=1.0), dict(oversampling=3.5),
                                    dict(kernel_width=2), dict(kernel_width=9)])
def test_plan_rejects_out_of_range(kwargs):
    with pytest.raises(ValueError):
        nufft.plan((8, 8), np.zeros((1, 2)), **kwargs)


def test_center_impulse_gives_ones(rng):
    k = rng.uniform(-np.pi, np.pi, (50, 2))
    img = np.zeros((16, 16))
    img[8, 8] = 1
    p = nufft.plan((16, 16), k)
    assert_allclose(nufft.forward(p, img), 1.0, atol=1e-5)
    assert_allclose(nufft.direct_nudft(k, img), 1.0, atol=1e-14)


def test_zero_in_zero_out(rng):
    p = nufft.plan((16, 16), rng.uniform(-np.pi, np.pi, (10, 2)))
    assert np.all(nufft.forward(p, np.zeros((16, 16))) == 0)
    assert np.all(nufft.adjoint(p, np.zeros(10)) == 0)


@pytest.mark.parametrize("n", [16, 32])
def test_forward_and_adjoint_match_direct(n, rng):
    for _ in range(5):
        x = crandn(rng, n, n)
        y = crandn(rng, 64)
        k = rng.uniform(-np.pi, np.pi, (64, 2))
        p = nufft.plan((n, n), k)
        assert rel(nufft.forward(p, x), nufft.direct_nudft(k, x)) <= 1e-5
        assert rel(nufft.adjoint(p, y), nufft.direct_nudft_adjoint(k, y, (n, n))) <= 1e-5


def test_adjoint_inner_product(rng):
    for _ in range(10):
        x = crandn(rng, 16, 16)
        y = crandn(rng, 64)
        p = nufft.plan((16, 16), rng.uniform(-np.pi, np.pi, (64, 2)))
        lhs = np.vdot(nufft.forward(p, x), y)
        rhs = np.vdot(x, nufft.adjoint(p, y))
        assert abs(lhs - rhs) <= 1e-5 * np.linalg.norm(x) * np.linalg.norm(y)


def test_dc_sample_spreads_constant():
    p = nufft.plan((16, 16), np.zeros((1, 2)))
    # pointwise error of one kernel sum, looser than the aggregate bound
    assert_allclose(nufft.adjoint(p, np.ones(1)), 1.0, atol=1e-4)


def test_linearity(rng):
    p = nufft.plan((16, 16), rng.uniform(-np.pi, np.pi, (40, 2)))
    x, y = crandn(rng, 16, 16), crandn(rng, 16, 16)
    a, b = 0.3 - 1.2j, 2.0 + 0.5j
    lhs = nufft.forward(p, a * x + b * y)
    rhs = a * nufft.forward(p, x) + b * nufft.forward(p, y)
    assert rel(lhs, rhs) <= 1e-10


def test_batched_shapes(rng):
    p = nufft.plan((8, 8), rng.uniform(-np.pi, np.pi, (12, 2)))
    x = crandn(rng, 3, 2, 8, 8)
    s = nufft.forward(p, x)
    assert s.shape == (3, 2, 12)
    assert_allclose(s[1, 0], nufft.forward(p, x[1, 0]))
    assert nufft.adjoint(p, s).shape == (3, 2, 8, 8)


def test_shape_mismatch_errors(rng):
    p = nufft.plan((8, 8), rng.uniform(-np.pi, np.pi, (12, 2)))
    with pytest.raises(ValueError):
        nufft.forward(p, np.zeros((9, 8)))
    with pytest.raises(ValueError):
        nufft.adjoint(p, np.zeros(11))


def test_direct_matches_explicit_matrix(rng):
    k = rng.uniform(-np.pi, np.pi, (20, 2))
    n = 8
    r = np.arange(n) - n // 2
    mat = np.array([[np.exp(-1j * (kx * c + ky * rr)) for rr in r for c in r] for kx, ky in k])
    x = crandn(rng, n, n)
    y = crandn(rng, 20)
    assert_allclose(nufft.direct_nudft(k, x), mat @ x.ravel(), rtol=1e-12)
    assert_allclose(nufft.direct_nudft_adjoint(k, y, (n, n)).ravel(), mat.conj().T @ y, rtol=1e-12)


def test_direct_sum_of_ones():
    assert_allclose(nufft.direct_nudft(np.zeros((1, 2)), np.ones((8, 8))), 64.0)


def test_direct_refuses_large_grids():
    with pytest.raises(ValueError, match="refused"):
        nufft.direct_nudft(np.zeros((1, 2)), np.zeros((65, 64)))


def test_compiled_and_python_gridding_agree(rng):
    k = rng.uniform(-np.pi, np.pi, (100, 2))
    p = nufft.plan((16, 16), k)
    grid = crandn(rng, 3, p.oversampled[0] * p.oversampled[1])
    samples = crandn(rng, 3, 100)
    n_grid = grid.shape[1]
    assert_allclose(_gridding.interp(grid, p.idx, p.wts), _gridding.interp_py(grid, p.idx, p.wts),
                    rtol=1e-13)
    # identical sample-major accumulation order in both spreads
    a = _gridding.spread(samples, p.idx, p.wts, n_grid)
    b = _gridding.spread_py(samples, p.idx, p.wts, n_grid)
    assert a.tobytes() == b.tobytes()
