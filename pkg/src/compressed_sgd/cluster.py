"""Synchronous W-worker simulation with per-worker error accumulators and
exact communication accounting.

Every worker owns its streams: the oracle stream is private (worker index
in the stream id) while the compressor and noise streams are built from
the shared seed, so all workers draw the same xi_t and theta~_t without
exchanging them. The coordinator averages messages in worker order, which
keeps results independent of thread scheduling.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import compressors as C
from .compressors import CompressorSpec, Kind
from .linalg import ORACLE, SeededRng
from .objectives import DomainError, StochasticOracle
from .optimizer import Checkpoint, HyperParams, RunAborted, Streams, _bounded, _Recorder, _noise, message_bits


@dataclass
class WorkerState:
    id: int
    e: np.ndarray
    oracle: StochasticOracle
    streams: Streams

    @classmethod
    def create(cls, worker: int, oracle: StochasticOracle, seed: int) -> "WorkerState":
        return cls(worker, np.zeros((1, oracle.d)), oracle, Streams.make(seed, worker))


@dataclass(frozen=True)
class WorkerMessage:
    worker: int
    g: np.ndarray
    e_next: np.ndarray
    bits: int


@dataclass
class CommLedger:
    """Per-round, per-worker uplink and downlink bit counts."""

    workers: int
    rows: list[tuple[int, int, int, int]] = field(default_factory=list)
    uplink_total: np.ndarray = field(init=False)
    downlink_total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.uplink_total = np.zeros(self.workers, dtype=np.int64)
        self.downlink_total = np.zeros(self.workers, dtype=np.int64)

    def record(self, rnd: int, uplink, downlink: int) -> None:
        for w, up in enumerate(uplink):
            self.rows.append((rnd, w, int(up), int(downlink)))
            self.uplink_total[w] += int(up)
            self.downlink_total[w] += int(downlink)

    @property
    def rounds(self) -> int:
        return len({r[0] for r in self.rows})

    @property
    def total_uplink(self) -> int:
        return int(self.uplink_total.sum())

    @property
    def total_downlink(self) -> int:
        return int(self.downlink_total.sum())

    def conserved(self) -> bool:
        up = np.zeros(self.workers, dtype=np.int64)
        down = np.zeros(self.workers, dtype=np.int64)
        for _, w, u, dl in self.rows:
            up[w] += u
            down[w] += dl
        return bool(np.array_equal(up, self.uplink_total) and np.array_equal(down, self.downlink_total))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("round", "worker", "uplink_bits", "downlink_bits"))
            w.writerows(self.rows)


def downlink_bits(spec: CompressorSpec, value_bits: int = 64) -> int:
    # an average of RandomK messages keeps the shared index set
    if spec.kind is Kind.RANDOM_K:
        return spec.k * value_bits
    return spec.d * value_bits


def worker_compute(worker: WorkerState, x: np.ndarray, spec: CompressorSpec, hp: HyperParams,
                   value_bits: int = 64) -> WorkerMessage:
    """Local half of a round: u = e + grad F_i + xi, compress with the shared draw."""
    o = worker.oracle
    grad = o.objective.gradient(x)
    theta = o.draw(worker.streams.oracle, 1)
    xi = _noise(worker.streams.noise, 1, hp)
    theta_c = C.draw_theta(spec, worker.streams.compressor, 1)
    u = worker.e + o.apply(grad, theta) + xi
    g = C.apply(spec, u, theta_c)
    return WorkerMessage(worker.id, g, u - g, int(message_bits(spec, g, value_bits)[0]))


def average(messages: list[WorkerMessage]) -> np.ndarray:
    acc = messages[0].g.copy()
    for m in messages[1:]:
        acc = acc + m.g
    return acc / len(messages)


def round(workers: list[WorkerState], x: np.ndarray, spec: CompressorSpec, hp: HyperParams,
          pool: ThreadPoolExecutor | None = None, value_bits: int = 64):
    """One synchronous round. Returns (x', g, uplink bits per worker).

    Worker error accumulators are updated in place.
    """
    if x.shape != (1, spec.d):
        raise ValueError(f"dimension mismatch: expected (1, {spec.d}), got {x.shape}")
    if pool is None:
        msgs = [worker_compute(w, x, spec, hp, value_bits) for w in workers]
    else:
        msgs = list(pool.map(lambda w: worker_compute(w, x, spec, hp, value_bits), workers))
    g = average(msgs)
    for w, m in zip(workers, msgs):
        w.e = m.e_next
    return x - hp.eta * g, g, [m.bits for m in msgs]


def mean_error(workers: list[WorkerState]) -> np.ndarray:
    acc = workers[0].e.copy()
    for w in workers[1:]:
        acc = acc + w.e
    return acc / len(workers)


@dataclass
class AveragedOracle:
    """Single-process oracle whose sample is the mean of the workers' samples.

    It draws from the same per-worker oracle streams as the cluster (the
    ``rng`` passed to ``draw`` is ignored), so a single-process run with it
    sees exactly the cluster's stochastic gradients. Create one per run.
    """

    oracles: list[StochasticOracle]
    seed: int
    _rngs: list[SeededRng] = field(init=False, repr=False)

    def __post_init__(self):
        first = self.oracles[0].objective
        if any(o.objective is not first for o in self.oracles):
            raise ValueError("workers must share one objective")
        self._rngs = [SeededRng.for_purpose(self.seed, ORACLE, i) for i in range(len(self.oracles))]

    @property
    def objective(self):
        return self.oracles[0].objective

    @property
    def d(self) -> int:
        return self.objective.d

    def draw(self, rng, n: int = 1):
        return [o.draw(r, n) for o, r in zip(self.oracles, self._rngs)]

    def apply(self, grad: np.ndarray, theta) -> np.ndarray:
        acc = self.oracles[0].apply(grad, theta[0])
        for o, th in zip(self.oracles[1:], theta[1:]):
            acc = acc + o.apply(grad, th)
        return acc / len(self.oracles)


def distributed_run(oracles: list[StochasticOracle], spec: CompressorSpec, hp: HyperParams, x0,
                    seed: int = 0, reset_error: bool = False, *, T: int | None = None,
                    threads: int | None = None, value_bits: int = 64, record_every: int = 1,
                    keep_vectors: bool = False):
    """The compressed method over ``len(oracles)`` workers. Returns (RunTrace, CommLedger).

    The reset test runs at the coordinator on the averaged error; a reset
    costs each worker one dense uplink of its accumulator. The trace's
    ``bits`` column is the uplink total over workers.
    """
    W = len(oracles)
    if W < 1:
        raise ValueError("need at least one worker")
    obj = oracles[0].objective
    if any(o.objective is not obj for o in oracles):
        raise ValueError("workers must share one objective")
    if spec.d != obj.d or hp.d != obj.d:
        raise ValueError("dimension mismatch between objective, compressor and plan")
    T = hp.T if T is None else T
    workers = [WorkerState.create(i, o, seed) for i, o in enumerate(oracles)]
    x = np.asarray(x0, dtype=np.float64).reshape(1, -1).copy()
    obj.check_domain(x)
    ledger = CommLedger(W)
    rec = _Recorder(T, 1, obj.d, record_every, keep_vectors)
    checkpoints: list[Checkpoint] = []
    y0 = x.copy()
    anchor = x.copy()
    t_prime = 0
    eta = hp.eta
    down = downlink_bits(spec, value_bits)
    dense = spec.d * value_bits
    pool = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None

    def finish():
        return rec.trace(checkpoints=checkpoints, hp=hp, reset_error=reset_error, spec=spec,
                         stopped_at=None, final_x=x.copy())

    t = 0
    try:
        while True:
            ebar = mean_error(workers)
            fired = False
            extra = 0
            if reset_error:
                y = x - eta * ebar
                if t - t_prime > hp.I or float(np.linalg.norm(anchor - y, axis=1)[0]) > hp.R:
                    fired = True
                    checkpoints.append(Checkpoint(t, 0, x[0].copy()))
                    x = y
                    for w in workers:
                        w.e = np.zeros_like(w.e)
                    ebar = mean_error(workers)
                    anchor = x.copy()
                    t_prime = t
                    extra = dense
            elif t % hp.I_iters == 0:
                checkpoints.append(Checkpoint(t, 0, x[0].copy()))
            x_t = x
            if t < T:
                grad = obj.gradient(x)
                x_next, g, ups = round(workers, x, spec, hp, pool, value_bits)
                if not _bounded(x_next, *(w.e for w in workers)):
                    raise RunAborted("non-finite iterate or error accumulator", t)
                ups = [u + extra for u in ups]
                ledger.record(t, ups, down)
                bits = np.array([sum(ups)], dtype=np.int64)
            else:
                grad = obj.gradient(x)
                bits = np.zeros(1, dtype=np.int64)
            if t % record_every == 0 or t == T:
                y = x_t - eta * ebar
                rec.add(t, obj.value(x_t), obj.value(y), np.linalg.norm(grad, axis=1),
                        np.linalg.norm(ebar, axis=1), np.linalg.norm(y - y0, axis=1), bits, np.array([fired]))
            if keep_vectors:
                rec.vec["x"][t], rec.vec["e"][t], rec.vec["y"][t] = x_t, ebar, x_t - eta * ebar
            if t == T:
                break
            x = x_next
            t += 1
    except RunAborted as exc:
        exc.trace = finish()
        raise
    except DomainError as exc:
        raise RunAborted(str(exc), t, finish()) from exc
    finally:
        if pool is not None:
            pool.shutdown()
    return finish(), ledger
