"""Run configuration: a YAML file validated against a fixed schema.

Errors carry ``file:line:column`` of the offending node. Unknown keys are
rejected, and every random quantity is keyed by the explicit ``seed``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .compressors import CompressorSpec, Kind, NotACompressor, quantization_variance_factor
from .linalg import INIT, SeededRng
from .objectives import (DEFAULT_BOX, CubicRegQuadratic, DoubleWell, Noise, Quadratic, StochasticOracle,
                         certified_constants, rotated_spectrum)
from .optimizer import HyperParams, PlannerConstants, plan, randomk_size


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "double_well"
    dim: int = 10
    eigenvalues: list | None = None
    rotation_seed: int | None = None
    rho: float = 1.0
    box: float = DEFAULT_BOX


@dataclass(frozen=True)
class OracleConfig:
    noise: str = "additive_gaussian"
    sigma: float = 0.0
    per_worker: list | None = None


@dataclass(frozen=True)
class CompressorConfig:
    kind: str = "identity"
    k: Any = None
    s: int = 1
    value_bits: int = 64


@dataclass(frozen=True)
class PlannerConfig:
    eps: float = 0.1
    L: float | None = None
    rho: float | None = None
    f_max: float | None = None
    mu: float | None = None
    T_cap: int | None = None
    constants: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExecutionConfig:
    T: int | None = None
    seed: int = 0
    seeds: int = 1
    workers: int = 1
    reset_error: bool = False
    x0: Any = "origin"
    x0_scale: float = 1.0
    threads: int = 1
    record_every: int = 1


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    compressor: CompressorConfig = field(default_factory=CompressorConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    execution: ExecutionConfig = field(default_factory=ExecutionConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: str = "<config>"


# ---------------------------------------------------------------------------
# schema

def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _num(v):
    return (_int(v) or isinstance(v, float)) and math.isfinite(v)


def _pos_int(v):
    return _int(v) and v >= 1


def _pos(v):
    return _num(v) and v > 0


def _nonneg(v):
    return _num(v) and v >= 0


def _opt(check):
    return lambda v: v is None or check(v)


def _one_of(*options):
    return lambda v: v in options


def _num_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_num(x) for x in v)


_CONSTANT_KEYS = {f.name for f in fields(PlannerConstants)}

SCHEMA: dict[str, dict[str, tuple]] = {
    "objective": {
        "kind": (_one_of("double_well", "quadratic", "cubic_reg_quadratic"), "one of double_well, quadratic, cubic_reg_quadratic"),
        "dim": (_pos_int, "a positive integer"),
        "eigenvalues": (_opt(_num_list), "a non-empty list of numbers"),
        "rotation_seed": (_opt(lambda v: _int(v) and v >= 0), "a non-negative integer or null"),
        "rho": (_pos, "a positive number"),
        "box": (_pos, "a positive number"),
    },
    "oracle": {
        "noise": (_one_of(*(n.value for n in Noise)), "additive_gaussian or coordinate_sampling"),
        "sigma": (_nonneg, "a non-negative number"),
        "per_worker": (_opt(lambda v: isinstance(v, list)), "a list of {noise, sigma} mappings"),
    },
    "compressor": {
        "kind": (_one_of(*(k.value for k in Kind)), "one of " + ", ".join(k.value for k in Kind)),
        "k": (lambda v: v is None or v == "auto" or _pos_int(v), "a positive integer, 'auto' or null"),
        "s": (_pos_int, "a positive integer"),
        "value_bits": (_one_of(32, 64), "32 or 64"),
    },
    "planner": {
        "eps": (lambda v: _num(v) and 0 < v <= 1, "a number in (0, 1]"),
        "L": (_opt(_pos), "a positive number or null"),
        "rho": (_opt(_pos), "a positive number or null"),
        "f_max": (_opt(_pos), "a positive number or null"),
        "mu": (_opt(lambda v: _num(v) and 0 < v <= 1), "a number in (0, 1] or null"),
        "T_cap": (_opt(lambda v: _int(v) and v >= 0), "a non-negative integer or null"),
        "constants": (lambda v: isinstance(v, dict), "a mapping of c_eta, c_I, c_R, c_F, c_r, c_T"),
    },
    "execution": {
        "T": (_opt(lambda v: _int(v) and v >= 0), "a non-negative integer or null"),
        "seed": (lambda v: _int(v) and 0 <= v < 2**64, "a 64-bit unsigned integer"),
        "seeds": (_pos_int, "a positive integer"),
        "workers": (_pos_int, "a positive integer"),
        "reset_error": (lambda v: isinstance(v, bool), "true or false"),
        "x0": (lambda v: v in ("origin", "uniform") or _num_list(v), "origin, uniform or a list of numbers"),
        "x0_scale": (_pos, "a positive number"),
        "threads": (_pos_int, "a positive integer"),
        "record_every": (_pos_int, "a positive integer"),
    },
    "output": {
        "dir": (lambda v: isinstance(v, str) and v != "", "a non-empty string"),
    },
}

_SECTION_TYPES = {"objective": ObjectiveConfig, "oracle": OracleConfig, "compressor": CompressorConfig,
                  "planner": PlannerConfig, "execution": ExecutionConfig, "output": OutputConfig}


def _where(source: str, node) -> str:
    m = node.start_mark
    return f"{source}:{m.line + 1}:{m.column + 1}"


def _mapping(source, node, what) -> list:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(source, node)}: {what} must be a mapping")
    seen = set()
    for k, _ in node.value:
        if not isinstance(k, yaml.ScalarNode):
            raise ConfigError(f"{_where(source, k)}: keys must be plain scalars")
        if k.value in seen:
            raise ConfigError(f"{_where(source, k)}: duplicate key '{k.value}'")
        seen.add(k.value)
    return node.value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Validate YAML text and return a RunConfig."""
    loader = yaml.SafeLoader(text)
    try:
        root = loader.get_single_node()
        if root is None:
            return RunConfig(source=source)
        sections = {}
        for knode, vnode in _mapping(source, root, "the config"):
            name = knode.value
            if name not in SCHEMA:
                raise ConfigError(f"{_where(source, knode)}: unknown section '{name}' "
                                  f"(expected one of {', '.join(SCHEMA)})")
            values = {}
            for kk, vv in _mapping(source, vnode, f"section '{name}'"):
                key = kk.value
                if key not in SCHEMA[name]:
                    raise ConfigError(f"{_where(source, kk)}: unknown key '{name}.{key}'")
                value = loader.construct_object(vv, deep=True)
                check, expect = SCHEMA[name][key]
                if not check(value):
                    raise ConfigError(f"{_where(source, vv)}: '{name}.{key}' must be {expect}, got {value!r}")
                if name == "planner" and key == "constants":
                    _check_constants(source, vv, loader)
                if name == "oracle" and key == "per_worker":
                    _check_workers(source, vv, loader)
                values[key] = value
            sections[name] = _SECTION_TYPES[name](**values)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    finally:
        loader.dispose()
    cfg = RunConfig(**sections, source=source)
    _cross_check(cfg, root)
    return cfg


def _check_constants(source, node, loader):
    for k, v in _mapping(source, node, "planner.constants"):
        if k.value not in _CONSTANT_KEYS:
            raise ConfigError(f"{_where(source, k)}: unknown planner constant '{k.value}'")
        value = loader.construct_object(v, deep=True)
        if not (_num(value) and value >= 0):
            raise ConfigError(f"{_where(source, v)}: planner constant '{k.value}' must be a non-negative number")


def _check_workers(source, node, loader):
    for item in node.value:
        for k, v in _mapping(source, item, "oracle.per_worker entries"):
            if k.value not in ("noise", "sigma"):
                raise ConfigError(f"{_where(source, k)}: unknown key '{k.value}' in oracle.per_worker")
            value = loader.construct_object(v, deep=True)
            check, expect = SCHEMA["oracle"][k.value]
            if not check(value):
                raise ConfigError(f"{_where(source, v)}: per-worker '{k.value}' must be {expect}")


def _cross_check(cfg: RunConfig, root) -> None:
    src = cfg.source
    o = cfg.objective
    if o.kind != "double_well" and o.eigenvalues is not None and len(o.eigenvalues) != o.dim:
        raise ConfigError(f"{src}: objective.eigenvalues has {len(o.eigenvalues)} entries, dim is {o.dim}")
    if o.kind != "double_well" and o.eigenvalues is None:
        raise ConfigError(f"{src}: objective.eigenvalues is required for {o.kind}")
    c = cfg.compressor
    if c.kind in ("random_k", "top_k") and c.k is None:
        raise ConfigError(f"{src}: compressor.k is required for {c.kind}")
    if isinstance(c.k, int) and c.k > o.dim:
        raise ConfigError(f"{src}: compressor.k={c.k} exceeds objective.dim={o.dim}")
    x0 = cfg.execution.x0
    if isinstance(x0, list) and len(x0) != o.dim:
        raise ConfigError(f"{src}: execution.x0 has {len(x0)} entries, dim is {o.dim}")
    pw = cfg.oracle.per_worker
    if pw is not None and len(pw) != cfg.execution.workers:
        raise ConfigError(f"{src}: oracle.per_worker lists {len(pw)} workers, execution.workers is "
                          f"{cfg.execution.workers}")


def load_config(path) -> RunConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


# ---------------------------------------------------------------------------
# building runnable objects

@dataclass
class Experiment:
    cfg: RunConfig
    objective: object
    oracles: list[StochasticOracle]
    spec: CompressorSpec
    hp: HyperParams
    x0: np.ndarray

    @property
    def oracle(self) -> StochasticOracle:
        return self.oracles[0]


def build_objective(o: ObjectiveConfig):
    if o.kind == "double_well":
        return DoubleWell(o.dim, box=o.box)
    H = rotated_spectrum(o.eigenvalues, o.rotation_seed)
    if o.kind == "quadratic":
        return Quadratic(H)
    return CubicRegQuadratic(H, rho=o.rho, box=o.box)


def initial_points(cfg: RunConfig, d: int, replicas: int) -> np.ndarray:
    ex = cfg.execution
    if ex.x0 == "origin":
        return np.zeros((replicas, d))
    if ex.x0 == "uniform":
        rng = SeededRng.for_purpose(ex.seed, INIT)
        return ex.x0_scale * (2.0 * rng.uniform((replicas, d)) - 1.0)
    return np.tile(np.asarray(ex.x0, dtype=np.float64), (replicas, 1))


def build(cfg: RunConfig, *, seed: int | None = None, seeds: int | None = None) -> Experiment:
    """Objective, per-worker oracles, compressor and planned hyperparameters."""
    from dataclasses import replace
    if seed is not None or seeds is not None:
        ex = replace(cfg.execution, seed=cfg.execution.seed if seed is None else seed,
                     seeds=cfg.execution.seeds if seeds is None else seeds)
        cfg = replace(cfg, execution=ex)
    obj = build_objective(cfg.objective)
    d = obj.d
    oc = cfg.oracle
    if oc.per_worker:
        oracles = [StochasticOracle(obj, Noise(w.get("noise", oc.noise)), float(w.get("sigma", oc.sigma)))
                   for w in oc.per_worker]
    else:
        oracles = [StochasticOracle(obj, Noise(oc.noise), float(oc.sigma)) for _ in range(cfg.execution.workers)]

    pc = cfg.planner
    L_cert, rho_cert, _ = certified_constants(obj, cfg.objective.box)
    L = pc.L if pc.L is not None else L_cert
    rho = pc.rho if pc.rho is not None else rho_cert
    if not rho > 0:
        raise ConfigError(f"{cfg.source}: objective has a constant Hessian; set planner.rho to a positive bound")
    lipschitz = all(o.lipschitz for o in oracles)
    alpha = 1 if lipschitz else d

    cc = cfg.compressor
    k = cc.k
    if k == "auto":
        k = randomk_size(d, pc.eps, alpha)
    spec = CompressorSpec(Kind(cc.kind), d, k=k if cc.kind in ("random_k", "top_k") else None, s=cc.s)
    mu = pc.mu
    if mu is None:
        try:
            mu = spec.mu
        except NotACompressor as exc:
            raise ConfigError(f"{cfg.source}: {exc}; set planner.mu explicitly "
                              f"(variance factor {quantization_variance_factor(d, cc.s):.4g})") from exc

    x0 = initial_points(cfg, d, cfg.execution.seeds)
    f_max = pc.f_max
    if f_max is None:
        low = obj.f_lower
        if not math.isfinite(low):
            raise ConfigError(f"{cfg.source}: objective is unbounded below; set planner.f_max")
        f_max = max(float(np.max(obj.value(x0))) - low, 1e-12)
    W = len(oracles)
    sigma = math.sqrt(sum(o.sigma**2 for o in oracles)) / W
    try:
        hp = plan(pc.eps, L, rho, sigma, oracles[0].ell_tilde(L), d, spec, lipschitz_sg=lipschitz, f_max=f_max,
                  constants=PlannerConstants(**pc.constants), mu=mu, T_cap=pc.T_cap)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: planner: {exc}") from exc
    return Experiment(cfg, obj, oracles, spec, hp, x0)
