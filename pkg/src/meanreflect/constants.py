"""Log-domain evaluation of the transport-inequality constants.

All quantities are natural logs.  The constants involve products such as
``q^(q/2)`` and exponentials of other constants, so they overflow double
precision in linear scale for moderate inputs.

Infima are located by a deterministic grid pre-scan followed by
golden-section refinement between the neighbours of the best grid point.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError

Q_DELTA = 1e-6
Q_MAX = 500.0
Q_SCAN = 2000
EPS_SCAN = 200
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ConstantEnv:
    T: float
    C_T: float = 0.0
    M_sigma: float = 1.0
    c_h: float | None = None
    C_h: float | None = None

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError(f"T must be positive, got {self.T}")
        if self.C_T < 0:
            raise DomainError(f"C_T must be >= 0, got {self.C_T}")
        if not self.M_sigma > 0:
            raise DomainError(f"M_sigma must be positive, got {self.M_sigma}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class Minimum:
    log_value: float
    argmin: float


def golden_section(fun, a: float, b: float, xtol: float = 1e-12, max_iter: int = 300) -> Minimum:
    """Minimize a unimodal scalar function on ``[a, b]``."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if abs(b - a) <= xtol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = fun(d)
    return Minimum(fc, c) if fc <= fd else Minimum(fd, d)


def golden_section_vec(fun, a, b, xtol: float = 1e-12, max_iter: int = 300):
    """Elementwise golden-section search; ``fun`` maps an array of abscissae
    to an array of values of the same shape."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if np.all(np.abs(b - a) <= xtol * np.maximum(1.0, np.abs(a) + np.abs(b))):
            break
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - _INVPHI * (b - a), d)
        new_d = np.where(left, c, a + _INVPHI * (b - a))
        f_new = fun(np.where(left, new_c, new_d))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
        c, d = new_c, new_d
    left = fc <= fd
    return np.where(left, fc, fd), np.where(left, c, d)


def _scan_then_refine(fun_vec, grid: np.ndarray, lo: float, hi: float) -> Minimum:
    values = fun_vec(grid)
    i = int(np.argmin(values))
    a = grid[i - 1] if i > 0 else lo
    b = grid[i + 1] if i < grid.size - 1 else hi
    best = golden_section(lambda s: float(fun_vec(np.array([s]))[0]), a, b)
    if values[i] < best.log_value:
        return Minimum(float(values[i]), float(grid[i]))
    return best


# --------------------------------------------------------------------------- C_{T,q}

def log_c_tq(T: float, q):
    """Log of the upper bound on ``C_{T,q}``; ``q > 10``, vectorized over ``q``."""
    q = np.asarray(q, dtype=float)
    if np.any(~(q > 10)):
        raise DomainError("log_c_tq requires q > 10")
    if not T > 0:
        raise DomainError("log_c_tq requires T > 0")
    val = (
        0.5 * q * np.log(q)
        + (0.25 * q - 1.5) * math.log(T)
        + q * math.log(2.0 / math.pi)
        - (0.5 * q + 1.0) * 0.5 * math.log(2.0 * math.pi)
        + (1.5 * q - 2.0) * np.log((6.0 * q - 8.0) / (q - 10.0))
    )
    return float(val) if val.ndim == 0 else val


def _q_grid() -> np.ndarray:
    # geometric in (q - 10) to resolve the pole at q = 10
    return 10.0 + np.geomspace(Q_DELTA, Q_MAX - 10.0, Q_SCAN)


def log_c_tpe_objective(T: float, p: float, eps: float, q):
    """Log of the quantity minimized over ``q`` in ``C_{T,p,eps}``."""
    q = np.asarray(q, dtype=float)
    lq = np.log(q)
    inner = np.logaddexp(np.log(q - p), lq + log_c_tq(T, q))
    return math.log(p) - np.log(q - p) - (q / p) * lq + (1.0 - q / p) * math.log(eps) + (q / p) * inner


def c_tpe_search(T: float, p: float, eps: float) -> Minimum:
    if not 0 < p <= 10:
        raise DomainError(f"p must lie in (0, 10], got {p}")
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    return _scan_then_refine(lambda q: log_c_tpe_objective(T, p, eps, q), _q_grid(), 10.0 + Q_DELTA, Q_MAX)


def log_c_tpe(T: float, p: float, eps: float) -> float:
    """``log C_{T,p,eps}`` (infimum over ``q`` in ``(10 + 1e-6, 500]``)."""
    return c_tpe_search(T, p, eps).log_value


def log_c_t2e_objective(T: float, eps: float, q):
    """The ``p = 2`` objective written out on its own:
    ``2/(q-2) q^(-q/2) eps^(1-q/2) (q - 2 + q C_{T,q})^(q/2)``."""
    q = np.asarray(q, dtype=float)
    inner = np.logaddexp(np.log(q - 2.0), np.log(q) + log_c_tq(T, q))
    return (math.log(2.0) - np.log(q - 2.0) - 0.5 * q * np.log(q)
            + (1.0 - 0.5 * q) * math.log(eps) + 0.5 * q * inner)


def c_t2e_search(T: float, eps: float) -> Minimum:
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    return _scan_then_refine(lambda q: log_c_t2e_objective(T, eps, q), _q_grid(), 10.0 + Q_DELTA, Q_MAX)


def log_c_t2e(T: float, eps):
    """``log C_{T,2,eps}``; vectorized over ``eps`` (one joint search per call)."""
    eps = np.asarray(eps, dtype=float)
    if eps.ndim == 0:
        return c_t2e_search(T, float(eps)).log_value
    if np.any(~(eps > 0)):
        raise DomainError("eps must be positive")
    q = _q_grid()
    # objective = a(q) + (1 - q/2) log eps, so the grid scan is one outer sum
    base = log_c_t2e_objective(T, 1.0, q)
    table = base[None, :] + (1.0 - 0.5 * q)[None, :] * np.log(eps)[:, None]
    i = np.argmin(table, axis=1)
    lo = np.where(i > 0, q[np.maximum(i - 1, 0)], 10.0 + Q_DELTA)
    hi = np.where(i < q.size - 1, q[np.minimum(i + 1, q.size - 1)], Q_MAX)
    log_eps = np.log(eps)

    def fun(qq):
        return log_c_t2e_objective(T, 1.0, qq) + (1.0 - 0.5 * qq) * log_eps

    refined, _ = golden_section_vec(fun, lo, hi)
    return np.minimum(refined, table[np.arange(eps.size), i])


# --------------------------------------------------------------------------- C_1 and C_2

def _factor(env: ConstantEnv, general: bool) -> float:
    if not general:
        return 12.0
    if env.c_h is None or env.C_h is None:
        raise DomainError("C_2 needs c_h and C_h")
    if not env.c_h > 0 or env.C_h < env.c_h:
        raise DomainError(f"need 0 < c_h <= C_h, got c_h={env.c_h}, C_h={env.C_h}")
    return 6.0 * (1.0 + env.C_h / env.c_h)


def log_bound_objective(env: ConstantEnv, factor: float, eps: float, log_c2e: float | None = None) -> float:
    """Log of the bracketed expression minimized over ``eps`` in ``C_1``/``C_2``.

    ``factor`` is 12 for ``C_1`` and ``6 (1 + C_h / c_h)`` for ``C_2``.
    """
    s = math.sqrt(2.0 * env.T / math.pi)
    a = factor * env.C_T ** 2
    shrink = math.log1p(-a * eps)
    if log_c2e is None:
        log_c2e = log_c_t2e(env.T, eps)
    log_exponent = math.log(a) + np.logaddexp(math.log(s), log_c2e) - shrink
    return math.log(factor * s * env.M_sigma ** 2) - shrink + math.exp(log_exponent)


def bound_search(env: ConstantEnv, general: bool = False) -> Minimum:
    """Infimum over ``eps`` for ``C_1`` (or ``C_2`` with ``general=True``).

    With ``C_T = 0`` the expression does not depend on ``eps`` and the closed
    form ``factor * sqrt(2T/pi) * M_sigma^2`` is returned with ``argmin = nan``.
    """
    factor = _factor(env, general)
    s = math.sqrt(2.0 * env.T / math.pi)
    if env.C_T == 0:
        return Minimum(math.log(factor * s * env.M_sigma ** 2), math.nan)
    eps_max = 1.0 / (factor * env.C_T ** 2)
    grid = eps_max * (np.arange(EPS_SCAN) + 0.5) / EPS_SCAN

    def fun_vec(eps):
        c2e = np.atleast_1d(log_c_t2e(env.T, eps))
        return np.array([log_bound_objective(env, factor, float(e), float(c))
                         for e, c in zip(eps, c2e)])

    return _scan_then_refine(fun_vec, grid, eps_max * 1e-12, eps_max * (1 - 1e-12))


def log_c1(env: ConstantEnv) -> float:
    return bound_search(env, general=False).log_value


def log_c2(env: ConstantEnv) -> float:
    return bound_search(env, general=True).log_value


def constants_record(env: ConstantEnv, q_sample: float = 12.0, p: float = 2.0, eps: float = 0.01) -> dict:
    """Summary used by the ``constants`` subcommand."""
    tpe = c_tpe_search(env.T, p, eps)
    c1 = bound_search(env)
    record = {
        "env": env.to_dict(),
        "q_sample": q_sample,
        "log_c_tq": log_c_tq(env.T, q_sample),
        "p": p,
        "eps": eps,
        "log_c_tpe": tpe.log_value,
        "argmin_q": tpe.argmin,
        "log_c1": c1.log_value,
        "argmin_eps_c1": None if math.isnan(c1.argmin) else c1.argmin,
    }
    if env.c_h is not None and env.C_h is not None:
        c2 = bound_search(env, general=True)
        record["log_c2"] = c2.log_value
        record["argmin_eps_c2"] = None if math.isnan(c2.argmin) else c2.argmin
    return record
