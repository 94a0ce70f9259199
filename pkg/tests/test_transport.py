import itertools
import math

import numpy as np
import pytest
from scipy import stats

from meanreflect.errors import ConfigurationError, ContractError
from meanreflect.grid import SpaceTimeGrid
from meanreflect.noise import DriftField
from meanreflect.reflect import LinearObstacle
from meanreflect.solver import CoefficientSpec
from meanreflect.transport import (
    EmpiricalMeasure1D,
    concentration_profile,
    run_coupling,
    t2_marginal_check,
    w2_quantile_1d,
)


def exhaustive_w2(a, b):
    # optimum over all n! assignments
    best = min(sum((a[i] - b[p]) ** 2 for i, p in enumerate(perm)) for perm in itertools.permutations(range(len(a))))
    return math.sqrt(best / len(a))


def test_w2_matches_exhaustive_assignment():
    rng = np.random.default_rng(9)
    for _ in range(10):
        a, b = rng.normal(size=(2, 8))
        assert abs(w2_quantile_1d(a, b) - exhaustive_w2(a, b)) <= 1e-12


def test_w2_metric_properties():
    rng = np.random.default_rng(1)
    a, b, c = rng.normal(size=(3, 50))
    assert w2_quantile_1d(a, a) == 0.0
    assert w2_quantile_1d(a, b) == w2_quantile_1d(b, a)
    assert w2_quantile_1d(a, c) <= w2_quantile_1d(a, b) + w2_quantile_1d(b, c) + 1e-15
    assert w2_quantile_1d(a, a + 0.7) == pytest.approx(0.7, abs=1e-15)
    assert w2_quantile_1d(EmpiricalMeasure1D(a), a[::-1]) == 0.0


def test_w2_contracts():
    with pytest.raises(ContractError):
        w2_quantile_1d([1.0, 2.0], [1.0])
    with pytest.raises(ContractError):
        EmpiricalMeasure1D([])
    with pytest.raises(ContractError):
        EmpiricalMeasure1D([np.inf])


GRID = SpaceTimeGrid.from_cfl(0.05, 16)
COEFFS = CoefficientSpec.additive(1.0)


def _couple(c, **kw):
    return run_coupling(GRID, COEFFS, LinearObstacle(), DriftField.constant(c), 200, 7, **kw)


def test_zero_drift_gives_zero_distance():
    rep = _couple(0.0)
    assert rep.entropy_h == 0.0
    assert rep.dist_sq == 0.0 and rep.w2_marginal == 0.0
    assert rep.margins["coupling_bound"] is None
    assert all(rep.checks.values())


def test_distance_scales_quadratically_and_k_is_shared():
    a = _couple(0.5)
    b = _couple(1.0)
    # additive noise: the pair difference is linear in g
    assert b.dist_sq == pytest.approx(4 * a.dist_sq, rel=1e-10)
    assert b.entropy_h == pytest.approx(4 * a.entropy_h, rel=1e-14)
    assert np.array_equal(a.k, _couple(0.0).k)
    assert np.array_equal(a.k, b.k)


def test_coupling_report_chain():
    rep = _couple(0.5)
    assert rep.entropy_h == pytest.approx(0.5 * 0.25 * GRID.T, rel=1e-14)
    assert rep.dist_sq > 0 and rep.margins["coupling_bound"] > 0
    assert all(rep.checks.values())
    ok, margin = t2_marginal_check(rep)
    assert ok and margin > 0
    d = rep.to_dict()
    assert set(d["margins"]) == {"coupling_bound", "marginal_bound", "projection"}
    assert d["grid"]["nx"] == GRID.nx


def test_coupling_workers_identical():
    a = _couple(0.5, workers=1)
    b = _couple(0.5, workers=3)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.pair_sup_sq, b.pair_sup_sq)


def test_coupling_configuration_errors():
    with pytest.raises(ConfigurationError):
        run_coupling(GRID, COEFFS, None, DriftField.constant(0.5), 1, 0)
    with pytest.raises(ConfigurationError):
        run_coupling(GRID, COEFFS, None, DriftField.constant(0.5), 4, 0, marginal=(1.0, 0.5))
    with pytest.raises(ConfigurationError):
        run_coupling(GRID, COEFFS, None, lambda s, y: s, 4, 0)


def test_concentration_gaussian_oracle():
    s = np.random.default_rng(5).normal(size=100_000)
    eps = np.array([1.0, 2.0, 2.5, 3.0])
    prof = concentration_profile(s, eps)
    oracle = stats.norm.sf(eps)
    assert np.all(np.abs(prof.tail - oracle) <= 4 * np.sqrt(oracle * (1 - oracle) / s.size) + 1e-4)
    assert prof.tail[0] == pytest.approx(0.1587, abs=5e-3)
    ref_slope = np.polyfit(eps ** 2, np.log(oracle), 1)[0]
    assert abs(prof.slope - ref_slope) <= 0.1 * abs(ref_slope)
    assert prof.rows().shape == (4, 3)


def test_concentration_edge_cases():
    with pytest.raises(ConfigurationError):
        concentration_profile(np.zeros(10), [1.0])
    with pytest.raises(ConfigurationError):
        concentration_profile(np.zeros(2000), [0.0])
    prof = concentration_profile(np.ones(2000), [0.1, 0.5])
    assert np.all(prof.tail == 0) and prof.slope is None
