import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from compressed_sgd.linalg import SeededRng, fd_gradient, fd_jacobian
from compressed_sgd.objectives import (
    CubicRegQuadratic, DomainError, DoubleWell, Noise, Quadratic, StochasticOracle, certified_constants,
    evaluate, rotated_spectrum, sample_gradient,
)

pts = arrays(np.float64, 5, elements=st.floats(-1.5, 1.5))


def objectives():
    H = rotated_spectrum([-1.0, 0.5, 1.0, 2.0, 3.0], rotation_seed=4)
    return [Quadratic(H), CubicRegQuadratic(H, rho=0.7, box=3.0), DoubleWell(5, box=2.0)]


@given(pts)
def test_gradient_matches_finite_differences(x):
    for obj in objectives():
        g = obj.gradient(x)
        assert np.allclose(fd_gradient(obj.value, x), g, atol=1e-5 * (1 + np.abs(g).max()))


@given(pts)
def test_hessian_matches_finite_differences(x):
    for obj in objectives():
        H = obj.hessian(x)
        assert np.allclose(H, H.T)
        assert np.allclose(fd_jacobian(obj.gradient, x), H, atol=1e-5 * (1 + np.abs(H).max()))


def test_batched_evaluation_matches_rows(rng):
    X = rng.uniform(-1, 1, (7, 5))
    for obj in objectives():
        assert np.allclose(obj.value(X), [obj.value(x) for x in X])
        assert np.allclose(obj.gradient(X), np.stack([obj.gradient(x) for x in X]))


def test_double_well_examples():
    obj = DoubleWell(3)
    f, g, H = evaluate(obj, np.zeros(3))
    assert f == 0 and np.all(g == 0) and np.allclose(H, -np.eye(3))
    assert obj.value(np.ones(3)) == pytest.approx(obj.f_lower)


def test_rotated_spectrum_preserves_eigenvalues():
    lam = [-2.0, 0.1, 4.0]
    assert np.allclose(np.linalg.eigvalsh(rotated_spectrum(lam, 9)), sorted(lam))
    assert np.array_equal(rotated_spectrum(lam), np.diag(lam))


def test_domain_box():
    obj = DoubleWell(2, box=1.0)
    with pytest.raises(DomainError, match="box"):
        obj.value(np.array([1.5, 0.0]))
    with pytest.raises(DomainError, match="non-finite"):
        obj.gradient(np.array([np.nan, 0.0]))
    with pytest.raises(DomainError, match="non-finite"):
        Quadratic(np.eye(2)).value(np.array([np.inf, 0.0]))


def test_evaluate_dimension_check():
    with pytest.raises(ValueError, match="dimension mismatch"):
        evaluate(DoubleWell(3), np.zeros(4))


def test_cubic_lower_bound_example():
    obj = CubicRegQuadratic(np.diag([-1.0, 1.0]), rho=2.0)
    # minimum along e1 is at s = 2 gamma / rho = 1
    assert obj.f_lower == pytest.approx(-1.0 / 6.0)
    assert obj.value(np.array([1.0, 0.0])) == pytest.approx(obj.f_lower)


def test_certified_constants_bound_sampled_hessians(rng):
    for obj in objectives():
        B = 1.0
        L, rho, f_max = certified_constants(obj, B)
        X = rng.uniform(-B, B, (200, obj.d))
        for x in X[:50]:
            assert np.max(np.abs(np.linalg.eigvalsh(obj.hessian(x)))) <= L * (1 + 1e-9)
        vals = obj.value(X)
        assert vals.max() - vals.min() <= f_max * (1 + 1e-9)
        for x, y in zip(X[:40], X[40:80]):
            dH = np.linalg.norm(obj.hessian(x) - obj.hessian(y), 2)
            assert dH <= rho * np.linalg.norm(x - y) * (1 + 1e-9) + 1e-12


def test_double_well_constants_example():
    L, rho, f_max = certified_constants(DoubleWell(4), 1.2)
    assert L == pytest.approx(3 * 1.44 - 1)
    assert rho == pytest.approx(7.2)


def test_additive_oracle_moments():
    obj = DoubleWell(8)
    o = StochasticOracle(obj, Noise.ADDITIVE_GAUSSIAN, sigma=0.5)
    x = np.full(8, 0.3)
    G = np.stack([sample_gradient(o, x, SeededRng(0, i)) for i in range(4000)])
    g = obj.gradient(x)
    assert np.allclose(G.mean(axis=0), g, atol=0.03)
    assert np.mean(np.sum((G - g) ** 2, axis=1)) == pytest.approx(0.25, rel=0.05)
    assert o.ell_tilde(2.0) == 2.0


def test_coordinate_sampling_unbiased():
    obj = DoubleWell(4)
    o = StochasticOracle(obj, Noise.COORDINATE_SAMPLING, sigma=1.0)
    x = np.array([0.1, -0.5, 0.9, 0.3])
    theta = o.draw(SeededRng(1), 100_000)
    G = o.apply(np.tile(obj.gradient(x), (len(theta), 1)), theta)
    assert np.allclose(G.mean(axis=0), obj.gradient(x), atol=0.02)
    assert np.all(np.count_nonzero(G, axis=1) <= 1)
    assert o.ell_tilde(2.0) == 8.0 and not o.lipschitz


def test_oracle_validation():
    with pytest.raises(ValueError):
        StochasticOracle(DoubleWell(2), sigma=-1.0)
    with pytest.raises(ValueError):
        StochasticOracle(DoubleWell(2), sigma=math.nan)
