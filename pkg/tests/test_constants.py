import math

import mpmath
import numpy as np
import pytest

from meanreflect.constants import (
    ConstantEnv,
    bound_search,
    c_tpe_search,
    constants_record,
    golden_section,
    log_c1,
    log_c2,
    log_c_t2e,
    log_c_t2e_objective,
    log_c_tpe,
    log_c_tq,
)
from meanreflect.errors import DomainError


# --------------------------------------------------------------------------- independent oracles

def oracle_log_c_tq(T, q):
    return (0.5 * q * np.log(q) + (0.25 * q - 1.5) * np.log(T) + q * np.log(2 / np.pi)
            - (0.5 * q + 1) * 0.5 * np.log(2 * np.pi) + (1.5 * q - 2) * np.log((6 * q - 8) / (q - 10)))


def oracle_tpe_objective(T, p, eps, q):
    inner = np.logaddexp(np.log(q - p), np.log(q) + oracle_log_c_tq(T, q))
    return np.log(p / (q - p)) - (q / p) * np.log(q) + (1 - q / p) * np.log(eps) + (q / p) * inner


def parabolic_min(xs, ys, i):
    """Vertex value of the parabola through the three points around index ``i``."""
    i = min(max(i, 1), len(xs) - 2)
    d0, d2 = xs[i - 1] - xs[i], xs[i + 1] - xs[i]
    y0, y1, y2 = ys[i - 1], ys[i], ys[i + 1]
    # y = y1 + b d + a d^2 in coordinates centred on the middle point
    a = (d2 * (y0 - y1) - d0 * (y2 - y1)) / (d0 * d2 * (d0 - d2))
    b = ((y2 - y1) - a * d2 * d2) / d2
    if a <= 0:
        return ys[i]
    return min(ys[i], y1 - b * b / (4 * a))


Q_ORACLE = 10.0 + np.geomspace(1e-6, 490.0, 20000)


def oracle_log_c_t2e(T, eps):
    """Dense inner q-grid, then a uniform local grid with parabolic refinement."""
    eps = np.atleast_1d(eps)
    base = oracle_tpe_objective(T, 2.0, 1.0, Q_ORACLE)
    out = np.empty(eps.size)
    for lo in range(0, eps.size, 500):
        e = eps[lo : lo + 500]
        idx = np.argmin(base[None, :] + (1 - Q_ORACLE / 2)[None, :] * np.log(e)[:, None], axis=1)
        left = Q_ORACLE[np.maximum(idx - 1, 0)]
        right = Q_ORACLE[np.minimum(idx + 1, Q_ORACLE.size - 1)]
        local = left[:, None] + (right - left)[:, None] * np.linspace(0, 1, 2001)[None, :]
        vals = oracle_tpe_objective(T, 2.0, e[:, None], local)
        j = np.argmin(vals, axis=1)
        out[lo : lo + 500] = [parabolic_min(qq, vv, jj) for qq, vv, jj in zip(local, vals, j)]
    return out


def oracle_log_bound(env, factor, n_eps=10_000):
    """Dense eps-grid, a local dense stage, parabolic refinement of the log of the objective."""
    s = math.sqrt(2 * env.T / math.pi)
    a = factor * env.C_T ** 2

    def objective(eps):
        shrink = np.log1p(-a * eps)
        return (math.log(factor * s * env.M_sigma ** 2) - shrink
                + np.exp(np.log(a) + np.logaddexp(np.log(s), oracle_log_c_t2e(env.T, eps)) - shrink))

    eps = (np.arange(n_eps) + 0.5) / n_eps / a
    i = int(np.argmin(objective(eps)))
    local = np.linspace(eps[max(i - 1, 0)], eps[min(i + 1, n_eps - 1)], 2001)
    vals = objective(local)
    j = int(np.argmin(vals))
    return math.exp(parabolic_min(local, np.log(vals), j))


# --------------------------------------------------------------------------- C_{T,q}

def test_c_tq_extended_precision():
    mpmath.mp.prec = 200
    q, T = mpmath.mpf(12), mpmath.mpf(1)
    prod = (q ** (q / 2) * T ** (q / 4 - mpmath.mpf(3) / 2) * (2 / mpmath.pi) ** q
            * (2 * mpmath.pi) ** (-(q / 2 + 1) / 2) * ((6 * q - 8) / (q - 10)) ** (3 * q / 2 - 2))
    ref = float(mpmath.log(prod))
    assert abs(log_c_tq(1.0, 12.0) - ref) <= 1e-9 * abs(ref)


def test_c_tq_pole_and_domain():
    vals = [log_c_tq(1.0, 10 + d) for d in (1e-2, 1e-4, 1e-8)]
    assert vals[0] < vals[1] < vals[2]
    for q in (10.0, 9.0):
        with pytest.raises(DomainError):
            log_c_tq(1.0, q)
    with pytest.raises(DomainError):
        log_c_tq(0.0, 12.0)


@pytest.mark.parametrize("q", [10.5, 12.0, 40.0, 500.0])
def test_c_tq_time_identity(q):
    assert log_c_tq(4.0, q) - log_c_tq(1.0, q) == pytest.approx((q / 4 - 1.5) * math.log(4), abs=1e-12)


def test_c_tq_vectorized():
    q = np.array([11.0, 20.0, 100.0])
    np.testing.assert_array_equal(log_c_tq(0.5, q), [log_c_tq(0.5, v) for v in q])


# --------------------------------------------------------------------------- C_{T,p,eps}

def test_c_tpe_dense_grid_oracle():
    q = np.arange(10_001, 500_001) / 1000.0
    ref = np.min(oracle_tpe_objective(1.0, 2.0, 0.01, q))
    got = log_c_tpe(1.0, 2.0, 0.01)
    assert got <= ref + 1e-6 * abs(ref)
    assert abs(got - ref) <= 1e-6 * abs(ref)


@pytest.mark.parametrize("p", [0.5, 1.0, 3.0, 9.5])
def test_c_tpe_other_p(p):
    q = np.arange(10_001, 500_001) / 1000.0
    ref = np.min(oracle_tpe_objective(0.5, p, 0.1, q))
    assert abs(log_c_tpe(0.5, p, 0.1) - ref) <= 1e-6 * abs(ref)


def test_c_tpe_monotone_in_eps():
    vals = [log_c_tpe(1.0, 2.0, e) for e in (1e-3, 1e-2, 0.1, 1.0, 10.0)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_c_tpe_at_p2_matches_separate_display():
    for T, eps in ((1.0, 0.01), (0.25, 0.3), (2.0, 1e-4)):
        assert abs(log_c_tpe(T, 2.0, eps) - log_c_t2e(T, eps)) <= 1e-12 * max(1.0, abs(log_c_t2e(T, eps)))
        q = np.linspace(10.5, 400, 50)
        from meanreflect.constants import log_c_tpe_objective
        np.testing.assert_allclose(log_c_tpe_objective(T, 2.0, eps, q), log_c_t2e_objective(T, eps, q),
                                   rtol=1e-13, atol=0)


def test_c_tpe_domain():
    for p in (0.0, -1.0, 10.5):
        with pytest.raises(DomainError):
            log_c_tpe(1.0, p, 0.1)
    with pytest.raises(DomainError):
        log_c_tpe(1.0, 2.0, 0.0)
    assert 10 < c_tpe_search(1.0, 2.0, 0.01).argmin <= 500


def test_c_t2e_vectorized_matches_scalar():
    eps = np.array([1e-4, 1e-2, 0.5, 3.0])
    vec = log_c_t2e(1.0, eps)
    for e, v in zip(eps, vec):
        assert abs(v - log_c_t2e(1.0, float(e))) <= 1e-12 * abs(v)


def test_c_t2e_oracle():
    eps = np.array([1e-3, 0.05, 0.2])
    np.testing.assert_allclose(log_c_t2e(1.0, eps), oracle_log_c_t2e(1.0, eps), rtol=0, atol=1e-9)


# --------------------------------------------------------------------------- C_1, C_2

def test_c1_closed_form():
    assert log_c1(ConstantEnv(0.25, 0.0, 1.0)) == pytest.approx(math.log(12 * math.sqrt(0.5 / math.pi)), abs=1e-15)
    assert math.exp(log_c1(ConstantEnv(0.25, 0.0, 1.0))) == pytest.approx(4.7873, abs=1e-4)
    assert math.isnan(bound_search(ConstantEnv(0.25)).argmin)


@pytest.mark.parametrize("ct", [0.0, 0.5])
def test_c1_m_sigma_scaling(ct):
    a = log_c1(ConstantEnv(1.0, ct, 1.0))
    b = log_c1(ConstantEnv(1.0, ct, 2.0))
    # exact up to the rounding of |log C_1|; for C_T > 0 that value is ~1e149 and absorbs log 4
    assert abs((b - a) - math.log(4)) <= max(1e-14, 4 * np.spacing(abs(a)))


def test_c1_dense_oracle():
    env = ConstantEnv(1.0, 0.5, 1.0)
    ref = oracle_log_bound(env, 12.0)
    assert abs(log_c1(env) - ref) <= 1e-6 * abs(ref)


def test_c2_dense_oracle():
    env = ConstantEnv(0.5, 0.3, 1.5, 1.0, 2.0)
    ref = oracle_log_bound(env, 6 * (1 + 2.0))
    assert abs(log_c2(env) - ref) <= 1e-6 * abs(ref)


def test_c2_equals_c1_when_h_is_affine():
    for ct in (0.0, 0.2, 1.0):
        env = ConstantEnv(0.7, ct, 1.3, 2.0, 2.0)
        assert abs(log_c2(env) - log_c1(env)) <= 1e-12 * max(1.0, abs(log_c1(env)))


def test_c2_prefactor_at_zero_lipschitz():
    env = ConstantEnv(0.25, 0.0, 1.0, 1.0, 3.0)
    assert log_c2(env) - log_c1(env) == pytest.approx(math.log(2), abs=1e-14)


def test_c2_domain():
    with pytest.raises(DomainError):
        log_c2(ConstantEnv(1.0, 0.5, 1.0))
    with pytest.raises(DomainError):
        log_c2(ConstantEnv(1.0, 0.5, 1.0, 2.0, 1.0))
    with pytest.raises(DomainError):
        ConstantEnv(0.0)
    with pytest.raises(DomainError):
        ConstantEnv(1.0, -1.0)


def test_c1_monotone_in_lipschitz_and_horizon():
    Ts = np.linspace(0.1, 2.0, 10)
    Cs = np.linspace(0.0, 2.0, 10)
    table = np.array([[log_c1(ConstantEnv(T, c, 1.0)) for c in Cs] for T in Ts])
    assert np.all(np.isfinite(table))
    assert np.all(np.diff(table, axis=0) >= -1e-9 * np.abs(table[1:]))
    assert np.all(np.diff(table, axis=1) >= -1e-9 * np.abs(table[:, 1:]))


def test_c2_dominates_c1():
    rng = np.random.default_rng(0)
    for _ in range(10):
        T, ct, m = rng.uniform(0.1, 2), rng.uniform(0, 1.5), rng.uniform(0.5, 2)
        c_h = rng.uniform(0.5, 2)
        env = ConstantEnv(T, ct, m, c_h, c_h * rng.uniform(1, 4))
        assert log_c2(env) >= log_c1(env) - 1e-12 * abs(log_c1(env))


def test_refined_search_never_worse_than_scan():
    env = ConstantEnv(1.0, 0.5, 1.0)
    eps_max = 1 / (12 * 0.25)
    grid = eps_max * (np.arange(200) + 0.5) / 200
    from meanreflect.constants import log_bound_objective
    scan = min(log_bound_objective(env, 12.0, float(e)) for e in grid)
    assert log_c1(env) <= scan


def test_golden_section():
    m = golden_section(lambda x: (x - 1.3) ** 2 + 2, 0, 5)
    assert m.argmin == pytest.approx(1.3, abs=1e-6)
    assert m.log_value == pytest.approx(2.0, abs=1e-12)


def test_record_is_finite():
    rec = constants_record(ConstantEnv(1.0, 0.5, 1.0, 1.0, 2.0))
    for k in ("log_c_tq", "log_c_tpe", "log_c1", "log_c2", "argmin_q", "argmin_eps_c1", "argmin_eps_c2"):
        assert math.isfinite(rec[k])
