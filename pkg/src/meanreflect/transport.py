"""Girsanov coupling, empirical Wasserstein distances and concentration tails.

:func:`run_coupling` builds the two-leg coupling used to bound ``W_2`` by the
relative entropy of a drift shift:

1. a drift-free ensemble run yields the deterministic reflection ``K``;
2. every pair shares one fresh sheet; the reference leg runs without drift,
   the shifted leg adds ``sigma(t, x, u) g(t, x)``, and both apply the same
   precomputed ``K``.

The mean over pairs of ``(sup |u - u_ref|)^2`` upper-bounds ``W_2^2`` of the
two laws; the 1-D ``W_2`` of a point marginal lower-bounds it.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constants import ConstantEnv, bound_search
from .errors import BlowUpError, ConfigurationError, ContractError
from .grid import SpaceTimeGrid
from .noise import DriftField, NoiseStream, derive_seed, entropy_of_drift
from .reflect import GeneralObstacle, ObstacleSpec
from .solver import NOISE_BLOCK, CoefficientSpec, Ensemble, fd_step, solve_mean_reflected

N_BOOTSTRAP = 200


# --------------------------------------------------------------------------- 1-D W2

@dataclass(frozen=True)
class EmpiricalMeasure1D:
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).ravel()
        if s.size == 0:
            raise ContractError("empirical measure needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ContractError("empirical measure samples must be finite")
        object.__setattr__(self, "samples", s)


def _samples(m) -> np.ndarray:
    return m.samples if isinstance(m, EmpiricalMeasure1D) else EmpiricalMeasure1D(m).samples


def w2_quantile_1d(a, b) -> float:
    """``W_2`` between equal-size empirical measures via the sorted coupling."""
    a = _samples(a)
    b = _samples(b)
    if a.size != b.size:
        raise ContractError(f"w2_quantile_1d needs equal sample counts, got {a.size} and {b.size}")
    d = np.sort(a) - np.sort(b)
    return math.sqrt(float(np.mean(d * d)))


# --------------------------------------------------------------------------- coupling

def constant_env(grid: SpaceTimeGrid, coeffs: CoefficientSpec, obstacle: ObstacleSpec | None) -> ConstantEnv:
    general = isinstance(obstacle, GeneralObstacle)
    return ConstantEnv(grid.T, coeffs.C_T, coeffs.M_sigma,
                       obstacle.c_h if general else None, obstacle.C_h if general else None)


def _log_or_none(x: float) -> float | None:
    return math.log(x) if x > 0 else None


def _diff_or_none(a, b):
    return None if a is None or b is None else a - b


@dataclass
class CouplingReport:
    """Outcome of one coupling experiment.

    ``margins`` are log-domain slacks ``log(bound) - log(estimate)``; a
    positive margin means the inequality holds.  A margin is ``None`` when a
    side is exactly zero.
    """

    entropy_h: float
    dist_sq: float
    dist_sq_se: float
    w2_marginal: float
    w2_se: float
    w2_sq_se: float
    log_c1: float
    log_c2: float | None
    log_bound_constant: float
    margins: dict
    checks: dict
    n_pairs: int
    grid: SpaceTimeGrid
    seed: int
    marginal: tuple
    inputs: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    # raw per-pair data, not serialized
    pair_sup_sq: np.ndarray | None = field(default=None, repr=False)
    marginal_u: np.ndarray | None = field(default=None, repr=False)
    marginal_ref: np.ndarray | None = field(default=None, repr=False)
    k: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs,
            "n_pairs": self.n_pairs,
            "seed": self.seed,
            "grid": self.grid.to_dict(),
            "marginal": {"t": self.marginal[0], "x": self.marginal[1]},
            "entropy_h": self.entropy_h,
            "dist_sq": self.dist_sq,
            "dist_sq_se": self.dist_sq_se,
            "w2_marginal": self.w2_marginal,
            "w2_se": self.w2_se,
            "w2_sq_se": self.w2_sq_se,
            "log_c1": self.log_c1,
            "log_c2": self.log_c2,
            "log_bound_constant": self.log_bound_constant,
            "margins": self.margins,
            "checks": self.checks,
            "diagnostics": self.diagnostics,
        }


def _bootstrap(stat, n: int, rng: np.random.Generator, n_boot: int = N_BOOTSTRAP) -> np.ndarray:
    return np.array([stat(rng.integers(0, n, n)) for _ in range(n_boot)])


def run_coupling(grid: SpaceTimeGrid, coeffs: CoefficientSpec, obstacle: ObstacleSpec | None, g: DriftField,
                 n_pairs: int, seed: int, constants_env: ConstantEnv | None = None, workers: int = 1,
                 marginal: tuple[float, float] | None = None, n_boot: int = N_BOOTSTRAP) -> CouplingReport:
    """Estimate both sides of the entropy-transport chain for the drift ``g``."""
    if not isinstance(g, DriftField):
        raise ConfigurationError("only deterministic DriftField drifts are supported")
    grid.require_cfl()
    if n_pairs < 2:
        raise ConfigurationError("n_pairs must be >= 2")
    t_star, x_star = marginal if marginal is not None else (grid.T, 0.5)
    step_star = int(round(t_star / grid.dt))
    node_star = int(round(x_star / grid.dx))
    if not (0 <= step_star <= grid.nt and 0 <= node_star <= grid.nx):
        raise ConfigurationError(f"marginal point ({t_star}, {x_star}) outside the grid")

    # stage 1: deterministic reflection from the drift-free system; never reads g
    stage1 = solve_mean_reflected(grid, coeffs, obstacle, n_pairs, seed, workers=workers)
    k = stage1.k.dk

    # stage 2: paired legs on shared fresh sheets
    gmat = g.matrix(grid)
    stream = NoiseStream(grid, derive_seed(seed, "coupling-pairs"), np.arange(n_pairs))
    ref = Ensemble.initial(grid, coeffs, n_pairs)
    shifted = Ensemble.initial(grid, coeffs, n_pairs)
    sup_diff = np.zeros(n_pairs)
    marg_u = marg_ref = None
    if step_star == 0:
        marg_u, marg_ref = shifted.u[:, node_star].copy(), ref.u[:, node_star].copy()
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    leg = "reference"
    try:
        block = None
        for n in range(grid.nt):
            b = n % NOISE_BLOCK
            if b == 0:
                block = stream.next_rows(min(NOISE_BLOCK, grid.nt - n), executor=executor, workers=workers)
            rows = block[:, b, :]
            leg = "reference"
            ref = fd_step(ref, coeffs, obstacle, rows, grid, fixed_dk_row=k[n], executor=executor, workers=workers)
            leg = "shifted"
            shifted = fd_step(shifted, coeffs, obstacle, rows, grid, drift_row=gmat[n], fixed_dk_row=k[n],
                              executor=executor, workers=workers)
            # the legs share zbar, so u - u_ref = z - z_ref
            np.maximum(sup_diff, np.max(np.abs(shifted.z - ref.z), axis=1), out=sup_diff)
            if n + 1 == step_star:
                marg_u, marg_ref = shifted.u[:, node_star].copy(), ref.u[:, node_star].copy()
    except BlowUpError as exc:
        raise BlowUpError(f"{leg} leg blew up at step {exc.step}, pair {exc.pair}",
                          step=exc.step, pair=exc.pair) from None
    finally:
        if executor is not None:
            executor.shutdown()

    pair_sq = sup_diff * sup_diff
    dist_sq = float(np.mean(pair_sq))
    w2 = w2_quantile_1d(marg_u, marg_ref)
    rng = np.random.default_rng(derive_seed(seed, "bootstrap"))
    dist_se = float(np.std(_bootstrap(lambda idx: np.mean(pair_sq[idx]), n_pairs, rng, n_boot), ddof=1))
    w_reps = _bootstrap(lambda idx: w2_quantile_1d(marg_u[idx], marg_ref[idx]), n_pairs, rng, n_boot)
    w2_se = float(np.std(w_reps, ddof=1))
    w2_sq_se = float(np.std(w_reps * w_reps, ddof=1))

    h = entropy_of_drift(g, grid)
    env = constants_env or constant_env(grid, coeffs, obstacle)
    log_c1 = bound_search(env).log_value
    log_c2 = bound_search(env, general=True).log_value if env.c_h is not None and env.C_h is not None else None
    log_c = log_c2 if isinstance(obstacle, GeneralObstacle) and log_c2 is not None else log_c1

    log_h = _log_or_none(h)
    log_chain = None if log_h is None else log_c + math.log(2.0) + log_h
    margins = {
        "coupling_bound": _diff_or_none(log_chain, _log_or_none(dist_sq)),
        "marginal_bound": _diff_or_none(log_chain, _log_or_none(w2 * w2)),
        "projection": _diff_or_none(_log_or_none(dist_sq + 3 * dist_se), _log_or_none(w2 * w2)),
    }
    bound = 0.0 if log_chain is None else math.exp(log_chain)
    checks = {
        "coupling_bound": dist_sq <= bound + 3 * dist_se,
        "marginal_bound": w2 * w2 <= bound + 3 * w2_sq_se,
        "projection_sq": w2 * w2 <= dist_sq + 3 * dist_se,
        "projection": w2 <= math.sqrt(dist_sq) + 3 * w2_se,
    }
    shifted_constraint = np.array(shifted.constraint)
    report = CouplingReport(
        entropy_h=h, dist_sq=dist_sq, dist_sq_se=dist_se, w2_marginal=w2, w2_se=w2_se, w2_sq_se=w2_sq_se,
        log_c1=log_c1, log_c2=log_c2, log_bound_constant=log_c, margins=margins, checks=checks,
        n_pairs=n_pairs, grid=grid, seed=seed, marginal=(t_star, x_star),
        inputs={
            "coefficients": coeffs.descriptor,
            "obstacle": getattr(obstacle, "descriptor", None),
            "drift": g.descriptor,
            "constants_env": env.to_dict(),
        },
        diagnostics={
            "stage1": {k_: v for k_, v in stage1.diagnostics.items() if k_ != "cfl"},
            "shifted_leg_constraint_min": float(shifted_constraint.min()) if shifted_constraint.size else 0.0,
            "reference_leg_constraint_min": float(np.min(ref.constraint)) if ref.constraint else 0.0,
        },
        pair_sup_sq=pair_sq, marginal_u=marg_u, marginal_ref=marg_ref, k=k,
    )
    return report


def t2_marginal_check(report: CouplingReport) -> tuple[bool, float | None]:
    """Marginal ``W_2^2`` against ``2 C H`` with a 3-standard-error allowance.

    Returns ``(passed, log_margin)`` where the margin is
    ``log(2 C H + 3 se) - log(w2^2)`` (``None`` if ``w2 == 0``).
    """
    w2_sq = report.w2_marginal ** 2
    log_rhs = -math.inf
    if report.entropy_h > 0:
        log_rhs = report.log_bound_constant + math.log(2.0 * report.entropy_h)
    if report.w2_sq_se > 0:
        log_rhs = float(np.logaddexp(log_rhs, math.log(3.0 * report.w2_sq_se)))
    if w2_sq == 0:
        return True, None
    margin = log_rhs - math.log(w2_sq)
    return margin >= 0, margin


# --------------------------------------------------------------------------- concentration

MIN_CONCENTRATION_SAMPLES = 1000


@dataclass(frozen=True)
class ConcentrationProfile:
    eps: np.ndarray
    tail: np.ndarray
    se: np.ndarray
    median: float
    slope: float | None
    intercept: float | None

    def rows(self) -> np.ndarray:
        return np.column_stack([self.eps, self.tail, self.se])


def concentration_profile(samples, eps_list: Sequence[float],
                          min_samples: int = MIN_CONCENTRATION_SAMPLES) -> ConcentrationProfile:
    """Empirical tails ``P(F > median + eps)`` with binomial standard errors.

    The companion fit regresses ``log tail`` on ``eps^2`` over the rows with a
    nonzero tail; its slope estimates ``-r`` in a Gaussian-type bound
    ``C exp(-r eps^2)``.  It is a diagnostic only.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < min_samples:
        raise ConfigurationError(f"concentration_profile needs >= {min_samples} samples, got {s.size}")
    eps = np.asarray(eps_list, dtype=float)
    if np.any(~(eps > 0)):
        raise ConfigurationError("eps values must be positive")
    med = float(np.median(s))
    tail = np.array([np.mean(s > med + e) for e in eps])
    se = np.sqrt(tail * (1 - tail) / s.size)
    ok = tail > 0
    slope = intercept = None
    if np.count_nonzero(ok) >= 2:
        slope, intercept = (float(v) for v in np.polyfit(eps[ok] ** 2, np.log(tail[ok]), 1))
    return ConcentrationProfile(eps, tail, se, med, slope, intercept)
