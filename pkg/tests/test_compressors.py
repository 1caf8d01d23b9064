import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from compressed_sgd import compressors as C
from compressed_sgd.compressors import CompressedMessage, CompressorSpec, Kind, NotACompressor
from compressed_sgd.linalg import SeededRng

vec = arrays(np.float64, 12, elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


def specs(d=12):
    return [CompressorSpec(Kind.IDENTITY, d), CompressorSpec(Kind.RANDOM_K, d, k=3),
            CompressorSpec(Kind.TOP_K, d, k=3), CompressorSpec(Kind.SIGN, d),
            CompressorSpec(Kind.QUANTIZATION, d, s=4)]


def test_spec_validation():
    with pytest.raises(ValueError, match="k <= d"):
        CompressorSpec(Kind.TOP_K, 5, k=6)
    with pytest.raises(ValueError):
        CompressorSpec(Kind.RANDOM_K, 5)
    with pytest.raises(ValueError):
        CompressorSpec("nope", 5)


def test_mu_values():
    assert CompressorSpec(Kind.IDENTITY, 10).mu == 1.0
    assert CompressorSpec(Kind.RANDOM_K, 10, k=2).mu == 0.2
    assert CompressorSpec(Kind.SIGN, 10).mu == 0.1
    assert CompressorSpec(Kind.QUANTIZATION, 3, s=1).mu == pytest.approx(2 - math.sqrt(3))
    with pytest.raises(NotACompressor):
        CompressorSpec(Kind.QUANTIZATION, 10, s=1).mu


def test_linear_flags():
    assert [s.linear for s in specs()] == [True, True, False, False, False]


def test_topk_example_ties_go_to_lower_index():
    spec = CompressorSpec(Kind.TOP_K, 4, k=2)
    out = C.apply(spec, np.array([[1.0, -3.0, 3.0, 0.5]]), None)
    assert np.array_equal(out, [[0.0, -3.0, 3.0, 0.0]])
    out = C.apply(spec, np.array([[2.0, 2.0, 2.0, 1.0]]), None)
    assert np.array_equal(out, [[2.0, 2.0, 0.0, 0.0]])


def test_sign_example():
    out = C.apply(CompressorSpec(Kind.SIGN, 4), np.array([[1.0, -2.0, 0.0, 1.0]]), None)
    assert np.array_equal(out, [[1.0, -1.0, 1.0, 1.0]])


def test_randomk_shared_theta_broadcasts():
    spec = CompressorSpec(Kind.RANDOM_K, 6, k=2)
    theta = C.draw_theta(spec, SeededRng(0), 1)
    X = np.arange(1.0, 19.0).reshape(3, 6)
    out = C.apply(spec, X, theta)
    assert np.array_equal(np.flatnonzero(out[0]), np.sort(theta[0]))
    assert np.array_equal(out != 0, np.broadcast_to(out[0] != 0, out.shape))


def test_randomk_indices_distinct_and_uniform():
    theta = C.draw_theta(CompressorSpec(Kind.RANDOM_K, 5, k=2), SeededRng(1), 50_000)
    assert np.all(theta[:, 0] != theta[:, 1])
    counts = np.bincount(theta.ravel(), minlength=5) / theta.size
    assert np.allclose(counts, 0.2, atol=0.01)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        C.apply(CompressorSpec(Kind.IDENTITY, 3), np.ones((1, 4)), None)


@given(vec, st.integers(0, 2**32))
def test_contraction_holds_per_draw_for_deterministic_kinds(x, seed):
    for spec in (CompressorSpec(Kind.TOP_K, 12, k=3), CompressorSpec(Kind.SIGN, 12), CompressorSpec(Kind.IDENTITY, 12)):
        c = C.apply(spec, x[None], None)[0]
        assert np.sum((x - c) ** 2) <= (1 - spec.mu) * np.sum(x * x) * (1 + 1e-12) + 1e-300


@given(vec)
def test_topk_and_identity_idempotent(x):
    for spec in (CompressorSpec(Kind.TOP_K, 12, k=4), CompressorSpec(Kind.IDENTITY, 12), CompressorSpec(Kind.SIGN, 12)):
        once = C.apply(spec, x[None], None)
        assert np.allclose(C.apply(spec, once, None), once, rtol=1e-12, atol=0)


@given(vec, st.integers(0, 2**32))
def test_randomk_idempotent_under_same_draw(x, seed):
    spec = CompressorSpec(Kind.RANDOM_K, 12, k=5)
    theta = C.draw_theta(spec, SeededRng(seed), 1)
    once = C.apply(spec, x[None], theta)
    assert np.array_equal(C.apply(spec, once, theta), once)


@given(vec, st.integers(0, 2**32))
def test_codec_round_trip(x, seed):
    for spec in specs():
        c, msg = C.compress(spec, x, SeededRng(seed))
        frame = msg.to_bytes()
        back = CompressedMessage.from_bytes(frame)
        theta = None
        if spec.kind is Kind.RANDOM_K:
            theta = C.draw_theta(spec, SeededRng(seed), 1)[0]
        out = C.decode(spec, back, theta)
        assert np.allclose(out, c, rtol=1e-12, atol=1e-12 * (1 + np.abs(x).max()))
        if spec.kind is Kind.QUANTIZATION:
            expected = C.message_cost_bits(spec, 64, int(np.count_nonzero(c)))
        else:
            expected = C.message_cost_bits(spec, 64)
        assert back.cost_bits == expected


def test_message_costs():
    d = 100
    assert C.message_cost_bits(CompressorSpec(Kind.IDENTITY, d)) == 6400
    assert C.message_cost_bits(CompressorSpec(Kind.RANDOM_K, d, k=4)) == 256
    assert C.message_cost_bits(CompressorSpec(Kind.TOP_K, d, k=4)) == 4 * (64 + 7)
    assert C.message_cost_bits(CompressorSpec(Kind.SIGN, d), 32) == 132
    with pytest.raises(ValueError, match="nnz"):
        C.message_cost_bits(CompressorSpec(Kind.QUANTIZATION, d))
    with pytest.raises(ValueError):
        C.message_cost_bits(CompressorSpec(Kind.IDENTITY, d), 16)


def test_quantization_unbiased():
    spec = CompressorSpec(Kind.QUANTIZATION, 6, s=2)
    x = np.array([0.3, -1.2, 0.0, 2.0, -0.1, 0.7])
    draws = C.compress_rows(spec, np.tile(x, (200_000, 1)), SeededRng(5))
    se = draws.std(axis=0) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 4 * se + 1e-12)


def test_quantization_zero_vector():
    spec = CompressorSpec(Kind.QUANTIZATION, 4)
    assert np.array_equal(C.compress_rows(spec, np.zeros((2, 4)), SeededRng(0)), np.zeros((2, 4)))


def test_factor_estimate_randomk():
    spec = CompressorSpec(Kind.RANDOM_K, 20, k=5)
    est = C.compression_factor_estimate(spec, C.isotropic_gaussian(20), 20_000, SeededRng(2))
    assert est.ratio == pytest.approx(0.75, abs=4 * est.stderr + 1e-3)
    assert est.trials == 20_000 and est.skipped == 0


def test_factor_estimate_skips_zero_inputs():
    est = C.compression_factor_estimate(CompressorSpec(Kind.SIGN, 3), lambda r, n: np.zeros((n, 3)), 10, SeededRng(0))
    assert est.skipped == 10 and math.isnan(est.ratio)
