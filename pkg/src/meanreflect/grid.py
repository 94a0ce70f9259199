from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform discretization of ``[0, T] x [0, 1]``.

    Only ``T``, ``nt`` and ``nx`` are stored; ``dt`` and ``dx`` are derived so
    that ``dt * nt == T`` and ``dx * nx == 1`` hold by construction.
    ``allow_unstable`` lets a grid violating ``dt <= dx^2/2`` run anyway.
    """

    T: float
    nt: int
    nx: int
    allow_unstable: bool = False

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigurationError(f"grid.T must be a positive finite time, got {self.T!r}")
        if int(self.nt) != self.nt or self.nt < 1:
            raise ConfigurationError(f"grid.nt must be an integer >= 1, got {self.nt!r}")
        if int(self.nx) != self.nx or self.nx < 2:
            raise ConfigurationError(f"grid.nx must be an integer >= 2, got {self.nx!r}")
        object.__setattr__(self, "nt", int(self.nt))
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def from_cfl(cls, T: float, nx: int, ratio: float = 0.5) -> SpaceTimeGrid:
        """Smallest ``nt`` with ``dt <= ratio * dx**2``."""
        dx = 1.0 / nx
        nt = max(1, math.ceil(T / (ratio * dx * dx) - 1e-9))
        grid = cls(T, nt, nx)
        # guard against the 1e-9 slack letting a marginally unstable step through
        if grid.dt > ratio * dx * dx:
            grid = cls(T, nt + 1, nx)
        return grid

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def x(self) -> np.ndarray:
        """All ``nx + 1`` spatial nodes, boundaries included."""
        return np.arange(self.nx + 1) * self.dx

    @property
    def x_interior(self) -> np.ndarray:
        return self.x[1:-1]

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    @property
    def cfl_ratio(self) -> float:
        return self.dt / (self.dx * self.dx)

    @property
    def cfl_ok(self) -> bool:
        return self.dt <= 0.5 * self.dx * self.dx

    def cfl_report(self) -> dict:
        return {"dt": self.dt, "dx": self.dx, "ratio": self.cfl_ratio, "cfl_ok": self.cfl_ok}

    def require_cfl(self) -> None:
        if not (self.cfl_ok or self.allow_unstable):
            raise ConfigurationError(
                f"CFL violated: dt={self.dt!r} > dx^2/2={0.5 * self.dx * self.dx!r} "
                f"(grid.nt={self.nt}, grid.nx={self.nx})"
            )

    def to_dict(self) -> dict:
        out = {"T": self.T, "nt": self.nt, "nx": self.nx}
        if self.allow_unstable:
            out["allow_unstable"] = True
        return out


def heat_step(field: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """One explicit Euler step of ``u_t = u_xx`` on interior nodes.

    ``field`` has shape ``(..., nx + 1)``; the result keeps the boundary
    columns at zero.
    """
    out = np.zeros_like(field)
    lam = dt / (dx * dx)
    out[..., 1:-1] = field[..., 1:-1] + lam * (field[..., :-2] - 2.0 * field[..., 1:-1] + field[..., 2:])
    return out
