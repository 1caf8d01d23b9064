import numpy as np
import pytest

from compressed_sgd import cluster as CL
from compressed_sgd.compressors import CompressorSpec, Kind
from compressed_sgd.objectives import DoubleWell, Noise, StochasticOracle
from compressed_sgd.optimizer import PlannerConstants, plan, run


def setup(W=3, kind=Kind.RANDOM_K, d=8, c_I=None):
    obj = DoubleWell(d, box=1.5)
    oracles = [StochasticOracle(obj, sigma=0.05 * (i + 1)) for i in range(W)]
    spec = CompressorSpec(kind, d, k=2 if kind in (Kind.RANDOM_K, Kind.TOP_K) else None)
    hp = plan(0.1, 5.75, 9.0, 0.1, 5.75, d, spec, f_max=2.0,
              constants=PlannerConstants(c_I=c_I) if c_I else None)
    return obj, oracles, spec, hp


def test_matches_single_process_with_averaged_oracle():
    obj, oracles, spec, hp = setup()
    x0 = np.full(8, 0.2)
    tr, ledger = CL.distributed_run(oracles, spec, hp, x0, seed=5, T=300, keep_vectors=True)
    ref = run(CL.AveragedOracle(oracles, 5), spec, hp, x0, seed=5, T=300, keep_vectors=True)
    assert np.allclose(tr.vectors["x"], ref.vectors["x"], rtol=1e-10, atol=1e-14)
    assert np.allclose(tr.vectors["e"], ref.vectors["e"], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kind,reset", [(Kind.RANDOM_K, False), (Kind.TOP_K, True), (Kind.SIGN, True)])
def test_single_worker_is_bitwise_identical(kind, reset):
    obj, oracles, spec, hp = setup(W=1, kind=kind, c_I=0.01)
    x0 = np.full(8, 0.3)
    tr, _ = CL.distributed_run(oracles, spec, hp, x0, seed=2, T=200, reset_error=reset)
    ref = run(oracles[0], spec, hp, x0, seed=2, T=200, reset_error=reset)
    assert np.array_equal(tr.final_x, ref.final_x)
    assert np.array_equal(tr.f, ref.f) and np.array_equal(tr.bits, ref.bits)
    assert [c.t for c in tr.checkpoints] == [c.t for c in ref.checkpoints]


def test_threads_do_not_change_results():
    _, oracles, spec, hp = setup(W=4)
    a, _ = CL.distributed_run(oracles, spec, hp, np.zeros(8), seed=1, T=100)
    b, _ = CL.distributed_run(oracles, spec, hp, np.zeros(8), seed=1, T=100, threads=4)
    assert np.array_equal(a.final_x, b.final_x)


def test_ledger_accounting(tmp_path):
    _, oracles, spec, hp = setup(W=3)
    T = 50
    tr, ledger = CL.distributed_run(oracles, spec, hp, np.zeros(8), T=T)
    assert ledger.rounds == T and ledger.conserved()
    assert ledger.total_uplink == 3 * T * 2 * 64 == tr.total_bits
    assert ledger.total_downlink == 3 * T * 2 * 64
    ledger.to_csv(tmp_path / "l.csv")
    rows = (tmp_path / "l.csv").read_text().splitlines()
    assert rows[0] == "round,worker,uplink_bits,downlink_bits" and len(rows) == 1 + 3 * T


def test_reset_charges_dense_uplink():
    _, oracles, spec, hp = setup(W=2, c_I=0.01)
    tr, ledger = CL.distributed_run(oracles, spec, hp, np.zeros(8), T=300, reset_error=True)
    resets = int(tr.reset[:-1].sum())
    assert resets > 0
    assert ledger.total_uplink == 2 * (300 * 2 * 64 + resets * 8 * 64)


def test_downlink_sizes():
    assert CL.downlink_bits(CompressorSpec(Kind.RANDOM_K, 10, k=3)) == 192
    assert CL.downlink_bits(CompressorSpec(Kind.TOP_K, 10, k=3)) == 640


def test_round_dimension_check():
    _, oracles, spec, hp = setup(W=1)
    workers = [CL.WorkerState.create(0, oracles[0], 0)]
    with pytest.raises(ValueError, match="dimension mismatch"):
        CL.round(workers, np.zeros((1, 5)), spec, hp)


def test_workers_must_share_objective():
    a, b = DoubleWell(4), DoubleWell(4)
    spec = CompressorSpec(Kind.IDENTITY, 4)
    hp = plan(0.1, 2.0, 6.0, 0.0, 2.0, 4, spec)
    with pytest.raises(ValueError, match="share"):
        CL.distributed_run([StochasticOracle(a), StochasticOracle(b)], spec, hp, np.zeros(4), T=1)


def test_heterogeneous_noise_kinds():
    obj = DoubleWell(4)
    oracles = [StochasticOracle(obj, Noise.COORDINATE_SAMPLING, 1.0), StochasticOracle(obj, sigma=0.1)]
    spec = CompressorSpec(Kind.IDENTITY, 4)
    hp = plan(0.1, 2.0, 6.0, 1.0, 8.0, 4, spec)
    tr, ledger = CL.distributed_run(oracles, spec, hp, np.full(4, 0.5), T=20)
    assert tr.t[-1] == 20 and ledger.total_uplink == 2 * 20 * 4 * 64
