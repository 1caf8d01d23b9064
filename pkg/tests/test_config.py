import textwrap

import numpy as np
import pytest

from compressed_sgd.compressors import Kind
from compressed_sgd.config import ConfigError, build, load_config, parse_config
from pathlib import Path

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))


def cfg(text):
    return parse_config(textwrap.dedent(text), "run.yaml")


def test_defaults():
    c = cfg("")
    assert c.objective.kind == "double_well" and c.compressor.kind == "identity" and c.planner.eps == 0.1


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_build(path):
    ex = build(load_config(path))
    assert ex.hp.violations() == []
    assert ex.x0.shape == (ex.cfg.execution.seeds, ex.objective.d)


@pytest.mark.parametrize("text,where,fragment", [
    ("objective:\n  dim: 3\n  colour: red\n", "run.yaml:3:3", "unknown key 'objective.colour'"),
    ("objectiv:\n  dim: 3\n", "run.yaml:1:1", "unknown section"),
    ("planner:\n  eps: 2.0\n", "run.yaml:2:8", "'planner.eps' must be a number in (0, 1]"),
    ("execution:\n  seeds: 0\n", "run.yaml:2:10", "positive integer"),
    ("execution:\n  reset_error: yes please\n", "run.yaml:2:16", "true or false"),
    ("compressor:\n  kind: top_k\n  kind: sign\n", "run.yaml:3:3", "duplicate key 'kind'"),
    ("planner:\n  constants:\n    c_q: 1\n", "run.yaml:3:5", "unknown planner constant"),
    ("oracle:\n  per_worker:\n    - {sigma: -1}\n", "run.yaml:3:15", "per-worker 'sigma'"),
    ("- a\n- b\n", "run.yaml:1:1", "must be a mapping"),
])
def test_errors_are_line_precise(text, where, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.yaml")
    msg = str(info.value)
    assert msg.startswith(where + ":"), msg
    assert fragment in msg


def test_yaml_syntax_error():
    with pytest.raises(ConfigError, match="run.yaml"):
        parse_config("objective: [\n", "run.yaml")


@pytest.mark.parametrize("text,fragment", [
    ("objective:\n  kind: quadratic\n  dim: 2\n", "eigenvalues is required"),
    ("objective:\n  kind: quadratic\n  dim: 2\n  eigenvalues: [1]\n", "has 1 entries"),
    ("compressor:\n  kind: top_k\n", "compressor.k is required"),
    ("objective:\n  dim: 3\ncompressor:\n  kind: top_k\n  k: 4\n", "exceeds"),
    ("execution:\n  x0: [1, 2]\n", "execution.x0 has 2 entries"),
    ("oracle:\n  per_worker: [{sigma: 1}]\nexecution:\n  workers: 2\n", "lists 1 workers"),
])
def test_cross_section_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text, "run.yaml")


def test_build_auto_k_and_defaults():
    ex = build(cfg("""
        objective: {dim: 100, box: 1.2}
        compressor: {kind: random_k, k: auto}
        planner: {eps: 0.01}
    """))
    assert ex.spec.k == 4
    assert ex.hp.L == pytest.approx(3 * 1.44 - 1) and ex.hp.rho == pytest.approx(7.2)


def test_build_quadratic_needs_rho():
    with pytest.raises(ConfigError, match="planner.rho"):
        build(cfg("objective: {kind: quadratic, dim: 2, eigenvalues: [1, 2]}"))


def test_build_quantization_needs_mu():
    text = "objective: {dim: 10}\ncompressor: {kind: quantization}\n"
    with pytest.raises(ConfigError, match="planner.mu"):
        build(cfg(text))
    ex = build(cfg(text + "planner: {mu: 0.5}\n"))
    assert ex.hp.mu == 0.5 and ex.spec.kind is Kind.QUANTIZATION


def test_bad_planner_constant_value():
    with pytest.raises(ConfigError, match="c_R must be positive"):
        build(cfg("planner: {constants: {c_R: 0}}"))


def test_overrides_and_initial_points():
    c = cfg("execution: {x0: uniform, x0_scale: 0.5, seeds: 3, seed: 7}\nobjective: {dim: 4}")
    a = build(c)
    b = build(c, seed=8, seeds=2)
    assert a.x0.shape == (3, 4) and np.all(np.abs(a.x0) <= 0.5)
    assert b.x0.shape == (2, 4) and not np.array_equal(a.x0[:2], b.x0)
    assert np.array_equal(build(c).x0, a.x0)


def test_worker_sigma_combination():
    ex = build(cfg("oracle: {per_worker: [{sigma: 0.3}, {sigma: 0.4}]}\nexecution: {workers: 2}"))
    assert ex.hp.sigma == pytest.approx(0.25)
    assert [o.sigma for o in ex.oracles] == [0.3, 0.4]
