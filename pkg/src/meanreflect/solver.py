"""Particle solver for the mean-reflected stochastic heat equation.

Each particle carries the unreflected field ``z_i``; the deterministic field
``zbar`` and the reflection increments are shared, and the solution is
``u_i = z_i + zbar``.  One step of :func:`fd_step` is

* explicit Euler for every ``z_i`` with coefficients evaluated on ``u_i``,
* a free heat step for ``zbar``,
* the minimal push restoring the mean constraint, added to ``zbar``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BlowUpError, ConfigurationError, ContractError
from .grid import SpaceTimeGrid, heat_step
from .kernel import DEFAULT_CONFIG, HeatKernelConfig, heat_propagate
from .noise import DriftField, NoiseSheet, NoiseStream
from .reflect import (
    DEFAULT_TOL,
    LinearObstacle,
    ObstacleSpec,
    ReflectionMeasure,
    flatness_residual,
    general_push,
    linear_push,
    mean_constraint,
    tree_mean,
)

NOISE_BLOCK = 64


# --------------------------------------------------------------------------- coefficients

def _const(c):
    c = float(c)
    return lambda t, x, u: c


F_BUILTINS: dict[str, Callable] = {
    "zero": lambda: (_const(0.0), 0.0, 0.0),
    "constant": lambda c: (_const(c), 0.0, abs(float(c))),
    "linear": lambda a: ((lambda t, x, u: a * u), abs(a), abs(a)),
    "sine": lambda a: ((lambda t, x, u: a * np.sin(u)), abs(a), abs(a)),
}

SIGMA_BUILTINS: dict[str, Callable] = {
    "constant": lambda c: (_const(c), 0.0, abs(float(c))),
    "sine": lambda c, b: ((lambda t, x, u: c + b * np.sin(u)), abs(b), abs(c) + abs(b)),
}

U0_BUILTINS: dict[str, Callable] = {
    "zero": lambda: (lambda x: np.zeros_like(np.asarray(x, dtype=float))),
    "sine": lambda amplitude=1.0, mode=1: (lambda x: amplitude * np.sin(mode * np.pi * np.asarray(x, dtype=float))),
}


@dataclass(frozen=True)
class CoefficientSpec:
    """Pointwise coefficients ``f(t, x, u)``, ``sigma(t, x, u)`` and the initial field.

    ``C_T``, ``M_T`` and ``M_sigma`` are the user-declared Lipschitz, growth
    and noise bounds.  The solver never reads them; they only feed the
    constants.
    """

    f: Callable
    sigma: Callable
    u0: Callable
    C_T: float = 0.0
    M_T: float = 0.0
    M_sigma: float = 1.0
    descriptor: dict = field(default_factory=dict, compare=False)

    @classmethod
    def additive(cls, sigma: float = 1.0, u0: Callable | None = None) -> CoefficientSpec:
        """``f = 0``, constant ``sigma``."""
        return cls.from_descriptor({"f": {"kind": "zero"}, "sigma": {"kind": "constant", "c": sigma},
                                    "u0": {"kind": "zero"}}, u0=u0)

    @classmethod
    def from_descriptor(cls, desc: dict, u0: Callable | None = None) -> CoefficientSpec:
        f, f_lip, f_growth = _builtin(F_BUILTINS, desc.get("f", {"kind": "zero"}), "coefficients.f")
        s, s_lip, s_bound = _builtin(SIGMA_BUILTINS, desc.get("sigma", {"kind": "constant", "c": 1.0}),
                                     "coefficients.sigma")
        if u0 is None:
            u0 = _builtin(U0_BUILTINS, desc.get("u0", {"kind": "zero"}), "coefficients.u0")
        full = {
            "f": desc.get("f", {"kind": "zero"}),
            "sigma": desc.get("sigma", {"kind": "constant", "c": 1.0}),
            "u0": desc.get("u0", {"kind": "zero"}),
            "C_T": float(desc.get("C_T", f_lip + s_lip)),
            "M_T": float(desc.get("M_T", f_growth)),
            "M_sigma": float(desc.get("M_sigma", s_bound)),
        }
        return cls(f, s, u0, full["C_T"], full["M_T"], full["M_sigma"], full)

    def check(self, grid: SpaceTimeGrid, n_samples: int = 256, seed: int = 0) -> list[str]:
        """Spot-check the declared constants and the initial condition."""
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, grid.T, n_samples)
        x = rng.uniform(0, 1, n_samples)
        a, b = rng.normal(0, 3, (2, n_samples))
        lip = (np.abs(self.f(t, x, a) - self.f(t, x, b)) + np.abs(self.sigma(t, x, a) - self.sigma(t, x, b)))
        issues = []
        if np.any(lip > self.C_T * np.abs(a - b) * (1 + 1e-9) + 1e-12):
            issues.append("f/sigma violate the declared Lipschitz constant C_T")
        if np.any(np.abs(self.sigma(t, x, a)) > self.M_sigma * (1 + 1e-9)):
            issues.append("sigma exceeds the declared bound M_sigma")
        u0 = np.asarray(self.u0(grid.x), dtype=float)
        if np.any(u0 < 0):
            issues.append("u0 must be nonnegative")
        if abs(u0[0]) > 1e-12 or abs(u0[-1]) > 1e-12:
            issues.append("u0 must vanish at x = 0 and x = 1")
        return issues


def _builtin(table, desc, where):
    desc = dict(desc)
    kind = desc.pop("kind", None)
    if kind not in table:
        raise ConfigurationError(f"{where}.kind must be one of {sorted(table)}, got {kind!r}")
    try:
        return table[kind](**desc)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: bad parameters for {kind!r}: {exc}") from None


# --------------------------------------------------------------------------- ensemble stepping

@dataclass
class Ensemble:
    """Current time slice of an ``N``-particle run.

    ``z`` has shape ``(N, nx + 1)`` and ``zbar`` shape ``(nx + 1,)``; the
    reflection rows and post-push constraint rows accumulate per step.
    """

    z: np.ndarray
    zbar: np.ndarray
    t_index: int = 0
    dk: list = field(default_factory=list)
    constraint: list = field(default_factory=list)

    @property
    def n_particles(self) -> int:
        return self.z.shape[0]

    @property
    def u(self) -> np.ndarray:
        return self.z + self.zbar[None, :]

    @classmethod
    def initial(cls, grid: SpaceTimeGrid, coeffs: CoefficientSpec, n_particles: int) -> Ensemble:
        u0 = np.asarray(coeffs.u0(grid.x), dtype=float) * np.ones(grid.nx + 1)
        u0[[0, -1]] = 0.0
        return cls(np.tile(u0, (n_particles, 1)), np.zeros(grid.nx + 1))


def _chunks(n: int, workers: int) -> list[slice]:
    workers = max(1, min(workers, n))
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _advance_particles(out, z, zbar, sl, coeffs, noise_rows, drift_row, t, grid):
    # overflow is caught by the finiteness check in fd_step
    with np.errstate(over="ignore", invalid="ignore"):
        zs = z[sl]
        u = zs[:, 1:-1] + zbar[None, 1:-1]
        xi = grid.x[1:-1]
        sig = coeffs.sigma(t, xi, u)
        new = heat_step(zs, grid.dt, grid.dx)
        new[:, 1:-1] -= grid.dt * coeffs.f(t, xi, u)
        new[:, 1:-1] += sig * noise_rows[sl, 1:] / grid.dx
        if drift_row is not None:
            new[:, 1:-1] += grid.dt * sig * drift_row[None, 1:]
    out[sl] = new


def fd_step(ens: Ensemble, coeffs: CoefficientSpec, obstacle: ObstacleSpec | None, noise_rows: np.ndarray,
            grid: SpaceTimeGrid, drift_row: np.ndarray | None = None, fixed_dk_row: np.ndarray | None = None,
            executor: ThreadPoolExecutor | None = None, workers: int = 1, tol: float = DEFAULT_TOL) -> Ensemble:
    """Advance the ensemble by one time step.

    ``noise_rows`` holds the current row of cell increments for every particle,
    shape ``(N, nx)``; interior node ``j`` is driven by cell ``j``.  With
    ``fixed_dk_row`` the reflection is not computed but the given increments
    are applied.  ``obstacle=None`` means no constraint.
    """
    grid.require_cfl()
    n = ens.t_index
    if n >= grid.nt:
        raise ContractError("ensemble is already at the final time")
    N = ens.n_particles
    if noise_rows.shape != (N, grid.nx):
        raise ContractError(f"noise rows shape {noise_rows.shape} != ({N}, {grid.nx})")
    t_now = grid.t[n]
    t_next = grid.t[n + 1]
    xi = grid.x_interior

    z_new = np.empty_like(ens.z)
    chunks = _chunks(N, workers) if executor is not None else [slice(0, N)]
    args = (z_new, ens.z, ens.zbar)
    rest = (coeffs, noise_rows, drift_row, t_now, grid)
    if len(chunks) > 1:
        list(executor.map(lambda sl: _advance_particles(*args, sl, *rest), chunks))
    else:
        _advance_particles(*args, chunks[0], *rest)

    with np.errstate(over="ignore", invalid="ignore"):
        zbar_new = heat_step(ens.zbar, grid.dt, grid.dx)
    prop = zbar_new[1:-1]
    zi = z_new[:, 1:-1]
    if fixed_dk_row is not None:
        row = np.asarray(fixed_dk_row, dtype=float)
        if row.shape != prop.shape:
            raise ContractError(f"fixed reflection row shape {row.shape} != {prop.shape}")
    elif obstacle is None:
        row = np.zeros_like(prop)
    elif isinstance(obstacle, LinearObstacle):
        v = tree_mean(zi) - obstacle.y(t_next, xi)
        row = linear_push(prop, v)
    else:
        row = general_push(prop, zi, obstacle.h, obstacle.c_h, obstacle.C_h, t_next, xi, tol)
    zbar_new[1:-1] = prop + row

    if obstacle is None:
        constraint = np.zeros_like(prop)
    elif isinstance(obstacle, LinearObstacle):
        constraint = zbar_new[1:-1] + tree_mean(zi) - obstacle.y(t_next, xi)
    else:
        constraint = mean_constraint(obstacle.h, t_next, xi, zbar_new[1:-1], zi)

    if not (np.all(np.isfinite(z_new)) and np.all(np.isfinite(zbar_new))):
        bad = np.flatnonzero(~np.all(np.isfinite(z_new), axis=1))
        pair = int(bad[0]) if bad.size else None
        raise BlowUpError(f"non-finite state at step {n} (t={t_now!r}), first bad particle {pair}",
                          step=n, pair=pair)
    return Ensemble(z_new, zbar_new, n + 1, ens.dk + [row], ens.constraint + [constraint])


# --------------------------------------------------------------------------- full runs

@dataclass
class Trajectory:
    """Result of :func:`solve_mean_reflected`.

    ``sup_norms[s, i]`` is ``sup |u_i|`` over all nodes and times up to
    snapshot ``s``.  ``fields`` holds full ensembles at snapshots only when
    requested.
    """

    grid: SpaceTimeGrid
    n_particles: int
    seed: int
    snapshot_steps: list[int]
    mean_fields: np.ndarray
    sup_norms: np.ndarray
    k: ReflectionMeasure
    constraint: np.ndarray
    final_u: np.ndarray
    final_zbar: np.ndarray
    fields: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def snapshot_times(self) -> list[float]:
        return [s * self.grid.dt for s in self.snapshot_steps]

    @property
    def running_sup(self) -> np.ndarray:
        return self.sup_norms[-1]


def _snapshot_steps(grid: SpaceTimeGrid, snapshots: Sequence[float]) -> list[int]:
    steps = {grid.nt}
    for t in snapshots:
        if not 0 <= t <= grid.T * (1 + 1e-12):
            raise ConfigurationError(f"snapshot time {t!r} outside [0, T]")
        steps.add(min(grid.nt, int(round(t / grid.dt))))
    return sorted(steps)


def solve_mean_reflected(grid: SpaceTimeGrid, coeffs: CoefficientSpec, obstacle: ObstacleSpec | None,
                         n_particles: int, seed: int, drift: DriftField | None = None,
                         fixed_k: ReflectionMeasure | np.ndarray | None = None,
                         snapshots: Sequence[float] = (), workers: int = 1, noise_refine=(1, 1),
                         keep_fields: bool = False, tol: float = DEFAULT_TOL) -> Trajectory:
    """Run ``n_particles`` coupled particles over the whole grid.

    The result is a pure function of the arguments other than ``workers``.
    """
    grid.require_cfl()
    if n_particles < 1:
        raise ConfigurationError("n_particles must be >= 1")
    fixed = None
    if fixed_k is not None:
        fixed = fixed_k.dk if isinstance(fixed_k, ReflectionMeasure) else np.asarray(fixed_k, dtype=float)
        if fixed.shape != (grid.nt, grid.nx - 1):
            raise ContractError(f"fixed_k shape {fixed.shape} != ({grid.nt}, {grid.nx - 1})")
    steps = _snapshot_steps(grid, snapshots)
    drift_mat = drift.matrix(grid) if drift is not None else None

    ens = Ensemble.initial(grid, coeffs, n_particles)
    stream = NoiseStream(grid, seed, np.arange(n_particles), noise_refine)
    sup = np.max(np.abs(ens.u), axis=1)
    mean_fields, sup_norms, fields = [], [], []

    def record():
        u = ens.u
        mean_fields.append(tree_mean(u))
        sup_norms.append(sup.copy())
        if keep_fields:
            fields.append(u)

    if 0 in steps:
        record()
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        block = None
        for n in range(grid.nt):
            b = n % NOISE_BLOCK
            if b == 0:
                block = stream.next_rows(min(NOISE_BLOCK, grid.nt - n), executor=executor, workers=workers)
            ens = fd_step(ens, coeffs, obstacle, block[:, b, :], grid,
                          drift_row=None if drift_mat is None else drift_mat[n],
                          fixed_dk_row=None if fixed is None else fixed[n],
                          executor=executor, workers=workers, tol=tol)
            np.maximum(sup, np.max(np.abs(ens.u), axis=1), out=sup)
            if ens.t_index in steps:
                record()
    finally:
        if executor is not None:
            executor.shutdown()

    k = ReflectionMeasure(np.array(ens.dk).reshape(grid.nt, grid.nx - 1), grid.dx)
    constraint = np.array(ens.constraint).reshape(grid.nt, grid.nx - 1)
    traj = Trajectory(grid, n_particles, seed, steps, np.array(mean_fields), np.array(sup_norms), k,
                      constraint, ens.u, ens.zbar, np.array(fields) if keep_fields else None)
    traj.diagnostics = trajectory_diagnostics(traj, obstacle)
    return traj


def trajectory_diagnostics(traj: Trajectory, obstacle) -> dict:
    k = traj.k
    has_constraint = obstacle is not None
    violation = float(max(0.0, -traj.constraint.min())) if has_constraint and traj.constraint.size else 0.0
    sup2 = traj.running_sup ** 2
    return {
        "total_k_mass": k.total_mass,
        "k_min_increment": float(k.dk.min()) if k.dk.size else 0.0,
        "k_boundary_share": k.boundary_growth(),
        "flatness_residual": flatness_residual(traj.constraint, k.dk) if has_constraint else 0.0,
        "constraint_violation_max": violation,
        "mean_sup_norm_sq": float(np.mean(sup2)),
        "mean_sup_norm_sq_se": float(np.std(sup2, ddof=1) / math.sqrt(sup2.size)) if sup2.size > 1 else 0.0,
        "cfl": traj.grid.cfl_report(),
    }


# --------------------------------------------------------------------------- single-path cross-checks

MILD_MAX_NX = 32
MILD_MAX_NT = 64


def fd_solve_path(grid: SpaceTimeGrid, coeffs: CoefficientSpec, sheet: NoiseSheet | None) -> np.ndarray:
    """Unreflected finite-difference path ``z`` driven by one sheet (history ``(nt+1, nx+1)``)."""
    ens = Ensemble.initial(grid, coeffs, 1)
    inc = np.zeros((grid.nt, grid.nx)) if sheet is None else sheet.increments
    hist = [ens.z[0]]
    for n in range(grid.nt):
        ens = fd_step(ens, coeffs, None, inc[n][None, :], grid)
        hist.append(ens.z[0])
    return np.array(hist)


def mild_solve_small(grid: SpaceTimeGrid, coeffs: CoefficientSpec, sheet: NoiseSheet | None,
                     cfg: HeatKernelConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Unreflected path from direct kernel quadrature of the mild formula.

    ``z(t_n) = P_{t_n} u0 - dt sum_m P_{t_n - t_{m+1}} f_m + sum_m P_{t_n - t_{m+1}} (sigma_m dW_m / dx)``
    where ``P_s`` is :func:`heat_propagate` (identity for ``s = 0``) and the
    coefficients are evaluated on the mild path itself.
    """
    if grid.nx > MILD_MAX_NX or grid.nt > MILD_MAX_NT:
        raise ConfigurationError(
            f"mild_solve_small is limited to nx <= {MILD_MAX_NX}, nt <= {MILD_MAX_NT} "
            f"(got nx={grid.nx}, nt={grid.nt})"
        )
    x = grid.x
    xi = x[1:-1]
    inc = np.zeros((grid.nt, grid.nx)) if sheet is None else sheet.increments
    u0 = np.asarray(coeffs.u0(x), dtype=float) * np.ones(grid.nx + 1)
    u0[[0, -1]] = 0.0

    def propagate(field, lag_steps):
        return field if lag_steps == 0 else heat_propagate(field, lag_steps * grid.dt, cfg)

    hist = np.zeros((grid.nt + 1, grid.nx + 1))
    hist[0] = u0
    forcing = []
    for n in range(1, grid.nt + 1):
        m = n - 1
        t_m = grid.t[m]
        zm = hist[m][1:-1]
        src = np.zeros(grid.nx + 1)
        src[1:-1] = -grid.dt * coeffs.f(t_m, xi, zm) + coeffs.sigma(t_m, xi, zm) * inc[m, 1:] / grid.dx
        forcing.append(src)
        z = propagate(u0, n)
        for mm, src_m in enumerate(forcing):
            z = z + propagate(src_m, n - 1 - mm)
        hist[n] = z
    return hist
