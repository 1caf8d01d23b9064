import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from compressed_sgd.compressors import CompressorSpec, Kind
from compressed_sgd.linalg import COMPRESSOR, SeededRng
from compressed_sgd.objectives import DoubleWell, Quadratic, StochasticOracle
from compressed_sgd.optimizer import (
    OptimizerState, PlannerConstants, RunAborted, Streams, comm_plan, corrected_iterate, descent_step_cap,
    maybe_reset, message_bits, plan, randomk_size, run, step, step_sizes,
)


def well_setup(d=6, sigma=0.1, spec=None, **kw):
    obj = DoubleWell(d, box=1.5)
    oracle = StochasticOracle(obj, sigma=sigma)
    spec = spec or CompressorSpec(Kind.RANDOM_K, d, k=2)
    hp = plan(0.1, 5.75, 9.0, sigma, 5.75, d, spec, f_max=2.0, **kw)
    return obj, oracle, spec, hp


# planner

def test_plan_relations_hold():
    _, _, spec, hp = well_setup()
    assert hp.violations() == []
    c = hp.constants
    assert hp.I == pytest.approx(c.c_I / (hp.eta * math.sqrt(hp.rho * hp.eps)))
    assert c.c_I == pytest.approx(4 * math.log(hp.d * hp.T))
    assert hp.T == math.ceil(hp.f_max / (hp.eps**2 * hp.eta))
    assert hp.I_iters == math.ceil(hp.I)


def test_plan_identity_example():
    # mu = 1: no compression constraint, eta = c_eta * eta_sigma unless capped
    hp = plan(0.1, 1.0, 1.0, 0.0, 1.0, 10)
    eta_sigma = 0.01 / 1.0 + min(0.01, math.sqrt(0.1))
    assert hp.eta_sigma == pytest.approx(eta_sigma)
    assert math.isinf(hp.eta_mu)
    assert hp.eta == pytest.approx(0.25 * eta_sigma)
    assert hp.r == pytest.approx(0.1 / math.sqrt(hp.eta))
    assert hp.chi2 == pytest.approx(hp.r**2)


def test_eta_mu_first_term_infinite_without_noise():
    _, em = step_sizes(0.1, 1.0, 1.0, 0.0, 1.0, 10, 0.5, True)
    assert em == pytest.approx(0.25 * math.sqrt(0.1) / 0.5)


def test_nonlinear_eta_mu_has_dimension_factor():
    _, lin = step_sizes(0.1, 1.0, 1.0, 0.0, 1.0, 10, 0.5, True)
    _, nonlin = step_sizes(0.1, 1.0, 1.0, 0.0, 1.0, 10, 0.5, False)
    assert nonlin == pytest.approx(lin * math.sqrt(0.1) / math.sqrt(0.1 * 1.0) / 10)


def test_step_clamped_below_descent_cap():
    hp = plan(1.0, 1.0, 1.0, 0.0, 1.0, 2, constants=PlannerConstants(c_eta=1e6))
    assert hp.eta == pytest.approx(0.999 * descent_step_cap(1.0, 1.0))
    assert hp.violations() == []


@given(st.floats(0.01, 1.0), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0, 2), st.integers(2, 50),
       st.floats(0.01, 1.0), st.booleans())
def test_plan_invariants_property(eps, L, rho, sigma, d, mu, linear):
    hp = plan(eps, L, rho, sigma, L, d, mu=mu, linear=linear)
    assert hp.violations() == []
    assert 0 < hp.eta < descent_step_cap(L, mu)
    assert hp.T >= 1


def test_plan_rejects_bad_inputs():
    with pytest.raises(ValueError):
        plan(0.0, 1.0, 1.0, 0.0, 1.0, 3)
    with pytest.raises(ValueError):
        plan(0.1, 1.0, 0.0, 0.0, 1.0, 3)
    with pytest.raises(ValueError):
        plan(0.1, 1.0, 1.0, 0.0, 1.0, 3, mu=0.0)
    with pytest.raises(ValueError):
        PlannerConstants(c_R=0)
    assert PlannerConstants(c_r=0).c_r == 0


def test_T_cap_and_explicit_c_I():
    hp = plan(0.1, 1.0, 1.0, 0.1, 1.0, 5, constants=PlannerConstants(c_I=2.0), T_cap=17)
    assert hp.T == 17
    assert hp.I * hp.eta * math.sqrt(0.1) == pytest.approx(2.0)


def test_randomk_size_examples():
    assert randomk_size(100, "0.01", 1) == 4
    assert randomk_size(1000, "0.1", 1) == 178
    assert randomk_size(10, "0.5", 10) == 2
    assert randomk_size(5, "1", 1) == 5


@given(st.integers(1, 5000), st.sampled_from(["0.01", "0.05", "0.1", "0.3", "0.5", "1"]), st.integers(1, 50))
def test_randomk_size_is_least_integer(d, eps, alpha):
    k = randomk_size(d, eps, alpha)
    target = Fraction(d**4) * Fraction(eps) ** 3 / alpha**2
    assert 1 <= k <= d
    if k < d:
        assert Fraction(k**4) >= target
    if k > 1:
        assert Fraction((k - 1) ** 4) < target


def test_comm_plan_bits():
    cp = comm_plan(100, "0.01", 1)
    assert cp.k == 4 and cp.coordinate_ratio == 25
    assert cp.bits_uncompressed == cp.iters_uncompressed * 6400
    assert cp.bits_randomk == cp.iters_randomk * 256
    assert 1 <= cp.iters_randomk / cp.iters_uncompressed <= 3


# engine

def test_T_zero_records_only_the_start():
    obj, oracle, spec, hp = well_setup()
    tr = run(oracle, spec, hp, np.full(6, 0.2), T=0)
    assert tr.t.tolist() == [0]
    assert tr.total_bits == 0
    assert tr.f[0, 0] == pytest.approx(obj.value(np.full(6, 0.2)))
    assert np.array_equal(tr.final_x[0], np.full(6, 0.2))


def test_step_example_identity_no_noise():
    obj = Quadratic(np.diag([1.0, 2.0]))
    oracle = StochasticOracle(obj)
    spec = CompressorSpec(Kind.IDENTITY, 2)
    hp = plan(0.1, 2.0, 1.0, 0.0, 2.0, 2, spec, constants=PlannerConstants(c_r=0))
    s0 = OptimizerState.initial(np.array([1.0, 1.0]))
    s1, rec = step(s0, oracle, spec, hp, Streams.make(0))
    assert np.allclose(s1.x, [[1 - hp.eta, 1 - 2 * hp.eta]])
    assert np.all(s1.e == 0)
    assert rec.bits.tolist() == [128]


def test_topk_step_keeps_residual_in_error():
    obj = Quadratic(np.diag([1.0, 3.0, 2.0]))
    spec = CompressorSpec(Kind.TOP_K, 3, k=1)
    hp = plan(0.1, 3.0, 1.0, 0.0, 3.0, 3, spec, constants=PlannerConstants(c_r=0))
    s1, rec = step(OptimizerState.initial(np.ones(3)), StochasticOracle(obj), spec, hp, Streams.make(0))
    assert np.allclose(rec.g, [[0.0, 3.0, 0.0]])
    assert np.allclose(s1.e, [[1.0, 0.0, 2.0]])
    assert np.allclose(corrected_iterate(s1, hp), np.ones(3) - hp.eta * np.array([1.0, 3.0, 2.0]))


def test_reset_examples():
    _, _, _, hp = well_setup()
    st0 = OptimizerState(5, np.array([[0.1] * 6]), np.array([[1.0] * 6]), np.array([0]), np.zeros((1, 6)))
    same, fired = maybe_reset(st0, hp, False)
    assert same is st0 and not fired.any()
    # far from the anchor: y becomes the new iterate and the error clears
    far = OptimizerState(5, np.full((1, 6), 1.0), np.zeros((1, 6)), np.array([0]), np.zeros((1, 6)))
    new, fired = maybe_reset(far, hp, True)
    assert fired.tolist() == [True]
    assert np.array_equal(new.x, far.x) and np.array_equal(new.x_anchor, far.x) and new.t_prime[0] == 5
    # overdue: t - t' > I
    late = OptimizerState(math.ceil(hp.I) + 1, np.zeros((1, 6)), np.full((1, 6), 1e-3), np.array([0]),
                          np.zeros((1, 6)))
    new, fired = maybe_reset(late, hp, True)
    assert fired[0] and np.all(new.e == 0)
    assert np.allclose(new.x, -hp.eta * 1e-3)


def test_message_bits_quantization_counts_nonzeros():
    spec = CompressorSpec(Kind.QUANTIZATION, 4, s=2)
    g = np.array([[0.0, 1.0, -1.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    assert message_bits(spec, g).tolist() == [64 + 2 * (2 + 1 + 1), 64]


def test_run_is_deterministic_and_csv_stable(tmp_path):
    _, oracle, spec, hp = well_setup()
    a = run(oracle, spec, hp, np.full(6, 0.1), seed=3, T=200, replicas=3, reset_error=True)
    b = run(oracle, spec, hp, np.full(6, 0.1), seed=3, T=200, replicas=3, reset_error=True)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "replica,t,f,grad_norm,err_norm,y_drift,bits,reset"
    c = run(oracle, spec, hp, np.full(6, 0.1), seed=4, T=200, replicas=3)
    assert not np.array_equal(a.f, c.f)


def test_replicas_are_independent():
    _, oracle, spec, hp = well_setup()
    tr = run(oracle, spec, hp, np.zeros(6), T=50, replicas=2)
    assert not np.array_equal(tr.f[:, 0], tr.f[:, 1])


def test_record_every_keeps_final_row():
    _, oracle, spec, hp = well_setup()
    tr = run(oracle, spec, hp, np.zeros(6), T=25, record_every=10)
    assert tr.t.tolist() == [0, 10, 20, 25]


def test_bits_accounting_with_resets():
    _, oracle, spec, hp = well_setup(constants=PlannerConstants(c_I=0.01))
    tr = run(oracle, spec, hp, np.zeros(6), T=300, reset_error=True)
    resets = int(tr.reset[:-1].sum())
    assert resets > 0
    assert tr.total_bits == 300 * 2 * 64 + resets * 6 * 64
    assert len(tr.checkpoints) == int(tr.reset.sum())


def test_checkpoints_without_reset():
    _, oracle, spec, hp = well_setup()
    tr = run(oracle, spec, hp, np.zeros(6), T=100, checkpoint_every=30, replicas=2)
    assert sorted({c.t for c in tr.checkpoints}) == [0, 30, 60, 90]
    assert len(tr.checkpoints_of(1)) == 4


def test_stop_callback_ends_run():
    _, oracle, spec, hp = well_setup()
    tr = run(oracle, spec, hp, np.zeros(6), T=1000, stop=lambda t, f: t >= 40)
    assert tr.stopped_at == 40 and tr.t[-1] == 40


def test_domain_exit_aborts_with_partial_trace():
    obj = DoubleWell(3, box=0.5)
    spec = CompressorSpec(Kind.IDENTITY, 3)
    hp = plan(0.1, 5.75, 9.0, 0.0, 5.75, 3, spec, constants=PlannerConstants(c_eta=1e6))
    with pytest.raises(RunAborted) as info:
        run(StochasticOracle(obj), spec, hp, np.full(3, 0.49), T=10_000)
    assert info.value.trace is not None and info.value.trace.t.size >= 1


def test_quantization_diverges_without_contraction():
    # s=1 quantization at d=10 has variance factor sqrt(10)-1 > 1: error feedback blows up
    d = 10
    obj = Quadratic(np.diag(np.linspace(0.5, 1.0, d)))
    spec = CompressorSpec(Kind.QUANTIZATION, d, s=1)
    hp = plan(0.1, 1.0, 0.01, 0.1, 1.0, d, spec, mu=0.5, linear=False)
    with pytest.raises(RunAborted, match="non-finite"):
        run(StochasticOracle(obj, sigma=0.1), spec, hp, np.ones(d), T=200_000, record_every=1000)


def test_summary_contents(tmp_path):
    _, oracle, spec, hp = well_setup()
    tr = run(oracle, spec, hp, np.zeros(6), T=20)
    tr.write_summary(tmp_path / "s.json")
    s = tr.summary()
    assert s["records"] == 21 and s["compressor"]["kind"] == "random_k"
    assert s["planner"]["eta"] == hp.eta


def test_dimension_mismatch():
    _, oracle, _, hp = well_setup()
    with pytest.raises(ValueError, match="dimension mismatch"):
        run(oracle, CompressorSpec(Kind.IDENTITY, 5), hp, np.zeros(6))


def test_streams_share_compressor_draws_across_workers():
    a, b = Streams.make(3, 0), Streams.make(3, 1)
    assert np.array_equal(a.compressor.normal(4), b.compressor.normal(4))
    assert not np.array_equal(a.oracle.normal(4), b.oracle.normal(4))
    assert np.array_equal(SeededRng.for_purpose(3, COMPRESSOR).normal(2), Streams.make(3).compressor.normal(2))
