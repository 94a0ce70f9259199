"""Minimal pushes enforcing a mean constraint, and obstacle descriptors.

The constraint at interior node ``j`` after a free heat step is

    mean_i h(t, x_j, zbar_j + k + v_ij) >= 0,

and the reflection increment is the smallest ``k >= 0`` achieving it.  For the
linear obstacle ``h(t, x, u) = u - y(t, x)`` the minimal push has a closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractError, DataError, NumericalContractError
from .grid import SpaceTimeGrid, heat_step

DEFAULT_TOL = 1e-12
MAX_BISECTIONS = 200


def tree_sum(a: np.ndarray) -> np.ndarray:
    """Sum over axis 0 along a fixed index-ascending pairwise tree.

    Rows ``2k`` and ``2k+1`` are added at every level; an odd trailing row is
    carried to the next level.  The result depends only on the array, never on
    how it was assembled.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 0:
        raise ContractError("cannot reduce an empty ensemble")
    while a.shape[0] > 1:
        n = a.shape[0]
        paired = a[0 : n - n % 2 : 2] + a[1 : n - n % 2 : 2]
        a = np.concatenate([paired, a[n - 1 :]]) if n % 2 else paired
    return a[0]


def tree_mean(a: np.ndarray) -> np.ndarray:
    return tree_sum(a) / a.shape[0]


# --------------------------------------------------------------------------- obstacles

def _zero_floor(t, x):
    return np.zeros(np.broadcast(np.asarray(t), np.asarray(x)).shape)


Y_BUILTINS: dict[str, Callable] = {
    "zero": lambda: _zero_floor,
    "constant": lambda c: (lambda t, x: np.full(np.broadcast(np.asarray(t), np.asarray(x)).shape, float(c))),
    # floor rising linearly in time, compatible with y(0,x) = y(t,0) = y(t,1) = 0
    "rising_sine": lambda a: (lambda t, x: a * np.asarray(t) * np.sin(np.pi * np.asarray(x))),
}


def make_floor(descriptor: dict) -> Callable:
    desc = dict(descriptor)
    kind = desc.pop("kind", None)
    if kind not in Y_BUILTINS:
        raise ConfigurationError(f"obstacle.y.kind must be one of {sorted(Y_BUILTINS)}, got {kind!r}")
    try:
        return Y_BUILTINS[kind](**desc)
    except TypeError as exc:
        raise ConfigurationError(f"obstacle.y: bad parameters for {kind!r}: {exc}") from None


@dataclass(frozen=True)
class LinearObstacle:
    """Mean constraint ``E[u(t, x)] >= y(t, x)``."""

    y: Callable = _zero_floor
    descriptor: dict = field(default_factory=lambda: {"kind": "linear", "y": {"kind": "zero"}})

    def h(self, t, x, u):
        return u - self.y(t, x)

    c_h = 1.0
    C_h = 1.0

    def check(self, grid: SpaceTimeGrid) -> list[str]:
        issues = []
        x = grid.x
        if np.any(self.y(0.0, x) != 0):
            issues.append("y(0, x) must vanish")
        t = grid.t
        if np.any(self.y(t, 0.0) != 0) or np.any(np.abs(self.y(t, 1.0)) > 1e-12):
            issues.append("y(t, 0) and y(t, 1) must vanish")
        return issues


def _affine(a: float = 1.0, y0: dict | None = None):
    floor = make_floor(y0 or {"kind": "zero"})
    return (lambda t, x, u: a * (u - floor(t, x))), a, a


def _sine_perturbed(a: float = 2.0, b: float = 1.0, y0: dict | None = None):
    if not a > abs(b):
        raise ConfigurationError("sine_perturbed needs a > |b| to be bi-Lipschitz")
    floor = make_floor(y0 or {"kind": "zero"})

    def h(t, x, u):
        w = u - floor(t, x)
        return a * w + b * np.sin(w)

    return h, a - abs(b), a + abs(b)


def _cubic_plus_linear(b: float = 1.0, C: float = 1e6):
    # y^3 + b*y is only locally bi-Lipschitz; C is the declared upper constant
    return (lambda t, x, u: u ** 3 + b * u), b, C


H_BUILTINS: dict[str, Callable] = {
    "affine": _affine,
    "sine_perturbed": _sine_perturbed,
    "cubic_plus_linear": _cubic_plus_linear,
}


@dataclass(frozen=True)
class GeneralObstacle:
    """Mean constraint ``E[h(t, x, u(t, x))] >= 0`` with ``h`` bi-Lipschitz in ``u``."""

    h: Callable
    c_h: float
    C_h: float
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.c_h > 0 or self.C_h < self.c_h:
            raise ConfigurationError(f"need 0 < c_h <= C_h, got c_h={self.c_h}, C_h={self.C_h}")

    @classmethod
    def builtin(cls, name: str, params: dict | None = None, c_h: float | None = None,
                C_h: float | None = None) -> GeneralObstacle:
        if name not in H_BUILTINS:
            raise ConfigurationError(f"obstacle.h.name must be one of {sorted(H_BUILTINS)}, got {name!r}")
        try:
            h, lo, hi = H_BUILTINS[name](**(params or {}))
        except TypeError as exc:
            raise ConfigurationError(f"obstacle.h: bad parameters for {name!r}: {exc}") from None
        desc = {"kind": "general", "h": {"name": name, "params": params or {}},
                "c_h": lo if c_h is None else c_h, "C_h": hi if C_h is None else C_h}
        return cls(h, desc["c_h"], desc["C_h"], desc)

    def check(self, grid: SpaceTimeGrid, n_samples: int = 256, seed: int = 0) -> list[str]:
        """Spot-check the bi-Lipschitz bounds and the boundary condition."""
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, grid.T, n_samples)
        x = rng.uniform(0, 1, n_samples)
        a, b = np.sort(rng.normal(0, 2, (2, n_samples)), axis=0)
        gap = b - a
        dh = self.h(t, x, b) - self.h(t, x, a)
        issues = []
        ok = gap > 1e-9
        if np.any(dh[ok] < self.c_h * gap[ok] * (1 - 1e-9)) or np.any(dh[ok] > self.C_h * gap[ok] * (1 + 1e-9)):
            issues.append("h violates the declared bi-Lipschitz constants")
        tt = grid.t
        if np.any(np.abs(self.h(tt, 0.0, 0.0)) > 1e-12) or np.any(np.abs(self.h(tt, 1.0, 0.0)) > 1e-12):
            issues.append("h(t, 0, 0) and h(t, 1, 0) must vanish")
        return issues


ObstacleSpec = LinearObstacle | GeneralObstacle


def make_obstacle(descriptor: dict) -> ObstacleSpec:
    kind = descriptor.get("kind")
    if kind == "linear":
        y_desc = descriptor.get("y", {"kind": "zero"})
        return LinearObstacle(make_floor(y_desc), {"kind": "linear", "y": y_desc})
    if kind == "general":
        h_desc = descriptor.get("h") or {}
        return GeneralObstacle.builtin(h_desc.get("name"), h_desc.get("params"),
                                       descriptor.get("c_h"), descriptor.get("C_h"))
    raise ConfigurationError(f"obstacle.kind must be 'linear' or 'general', got {kind!r}")


# --------------------------------------------------------------------------- pushes

def linear_push(proposal, v) -> np.ndarray:
    """``dK_j = max(0, -(proposal_j + v_j))``."""
    proposal = np.asarray(proposal, dtype=float)
    v = np.asarray(v, dtype=float)
    if proposal.shape != v.shape:
        raise ContractError(f"proposal {proposal.shape} and obstacle {v.shape} differ in shape")
    if np.isnan(proposal).any() or np.isnan(v).any():
        raise DataError("NaN in linear_push input")
    return np.maximum(0.0, -(proposal + v))


def mean_constraint(h, t, x, level, particle_values) -> np.ndarray:
    """``mean_i h(t, x_j, level_j + v_ij)`` with the fixed-order reduction."""
    return tree_mean(h(t, x[None, :], level[None, :] + particle_values))


def general_push(proposal, particle_values, h, c_h: float, C_h: float, t_next: float, x,
                 tol: float = DEFAULT_TOL, max_iter: int = MAX_BISECTIONS) -> np.ndarray:
    """Minimal ``k >= 0`` per node with ``mean_i h(t, x_j, proposal_j + k + v_ij) >= 0``.

    Nodes with a deficit ``d = -mean_i h(..., proposal_j + v_ij) > 0`` are
    bracketed in ``[d / C_h, d / c_h]`` and bisected until the bracket is
    narrower than ``tol``; the feasible end is returned.
    """
    proposal = np.asarray(proposal, dtype=float)
    v = np.atleast_2d(np.asarray(particle_values, dtype=float))
    x = np.asarray(x, dtype=float)
    if v.shape[1:] != proposal.shape or x.shape != proposal.shape:
        raise ContractError("proposal, particle values and nodes must share the node axis")
    if np.isnan(proposal).any() or np.isnan(v).any():
        raise DataError("NaN in general_push input")
    if not 0 < c_h <= C_h:
        raise ContractError(f"need 0 < c_h <= C_h, got {c_h}, {C_h}")

    dk = np.zeros_like(proposal)
    deficit = -mean_constraint(h, t_next, x, proposal, v)
    active = np.flatnonzero(deficit > 0)
    if active.size == 0:
        return dk

    d = deficit[active]
    p = proposal[active]
    va = v[:, active]
    xa = x[active]

    def g(k):
        return mean_constraint(h, t_next, xa, p + k, va)

    if c_h == C_h:
        dk[active] = d / c_h
        return dk

    lo = d / C_h
    hi = d / c_h
    # guard the bracket against an h that does not honour its declared constants
    lo = np.where(g(lo) >= 0, 0.0, lo)
    bad = g(hi) < 0
    if np.any(bad):
        hi = np.where(bad, hi + tol, hi)
        if np.any(g(hi) < 0):
            raise NumericalContractError(
                "mean constraint still violated at the upper bracket d/c_h + tol; "
                "h does not satisfy its bi-Lipschitz constants"
            )
    for _ in range(max_iter):
        open_ = hi - lo > tol
        if not np.any(open_):
            break
        mid = 0.5 * (lo + hi)
        feasible = g(mid) >= 0
        hi = np.where(open_ & feasible, mid, hi)
        lo = np.where(open_ & ~feasible, mid, lo)
    else:
        raise NumericalContractError(f"bisection did not reach tol={tol} in {max_iter} iterations")
    dk[active] = hi
    return dk


def flatness_residual(constraint_rows, dk_rows) -> float:
    """``sum_{n,j} max(0, mean h(n, j)) * dK[n, j]``; zero for a flat solution."""
    c = np.asarray(constraint_rows, dtype=float)
    k = np.asarray(dk_rows, dtype=float)
    if c.shape != k.shape:
        raise ContractError(f"constraint {c.shape} and increments {k.shape} are not aligned")
    if c.size == 0:
        return 0.0
    return float(np.sum(np.maximum(0.0, c) * k))


@dataclass
class ReflectionMeasure:
    """Increments ``dk[n, j]`` of the pushing field on interior nodes.

    ``dk`` is a field increment (added to ``zbar``); as a measure on
    ``[0, T] x (0, 1)`` the mass of a cell is ``dk * dx``.
    """

    dk: np.ndarray
    dx: float

    def __post_init__(self):
        self.dk = np.asarray(self.dk, dtype=float)
        if self.dk.ndim != 2:
            raise ContractError("reflection increments must be an nt x (nx - 1) matrix")

    @property
    def total_mass(self) -> float:
        return float(self.dk.sum()) * self.dx

    def check(self) -> list[str]:
        issues = []
        if np.any(self.dk < 0):
            issues.append("negative reflection increment")
        if not np.all(np.isfinite(self.dk)):
            issues.append("non-finite reflection increment")
        return issues

    def boundary_growth(self) -> float:
        """Share of the total mass carried by the two nodes next to the boundary."""
        total = self.dk.sum()
        if total == 0:
            return 0.0
        edge = self.dk[:, 0].sum() + self.dk[:, -1].sum()
        return float(edge / total)


def evolve_obstacle(grid: SpaceTimeGrid, obstacle: GeneralObstacle, v_history,
                    tol: float = DEFAULT_TOL) -> tuple[np.ndarray, ReflectionMeasure]:
    """Deterministic obstacle dynamics ``zbar_t = zbar_xx + K`` for given obstacles.

    ``v_history`` has shape ``(nt + 1, N, nx + 1)`` (or ``(nt + 1, nx + 1)`` for
    a single deterministic obstacle).  Returns the ``zbar`` history on all
    nodes and the reflection increments.
    """
    v = np.asarray(v_history, dtype=float)
    if v.ndim == 2:
        v = v[:, None, :]
    if v.shape[0] != grid.nt + 1 or v.shape[2] != grid.nx + 1:
        raise ContractError(f"obstacle history shape {v.shape} does not match grid")
    xi = grid.x_interior
    zbar = np.zeros((grid.nt + 1, grid.nx + 1))
    dk = np.zeros((grid.nt, grid.nx - 1))
    for n in range(grid.nt):
        prop = heat_step(zbar[n], grid.dt, grid.dx)
        row = general_push(prop[1:-1], v[n + 1][:, 1:-1], obstacle.h, obstacle.c_h, obstacle.C_h,
                           grid.t[n + 1], xi, tol)
        prop[1:-1] += row
        zbar[n + 1] = prop
        dk[n] = row
    return zbar, ReflectionMeasure(dk, grid.dx)
