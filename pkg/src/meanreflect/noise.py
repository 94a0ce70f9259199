"""Discrete space-time white noise and the Girsanov drift shift.

A sheet is an ``nt x nx`` matrix of cell masses ``dW[n, j]`` of the cells
``[t_n, t_{n+1}] x [x_j, x_{j+1}]``.  Every particle owns a Philox stream keyed
by ``(seed, particle_id)``; entries are drawn in row-major cell order, so the
value of a cell depends only on the seed, the particle and the cell index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DataError
from .grid import SpaceTimeGrid

_MASK64 = (1 << 64) - 1


def particle_generator(seed: int, particle_id: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, particle_id & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, tag: str) -> int:
    """Independent 64-bit seed for a named sub-experiment of ``seed``."""
    words = [ord(c) for c in tag]
    state = np.random.SeedSequence(entropy=seed & _MASK64, spawn_key=words).generate_state(1, np.uint64)
    return int(state[0])


@dataclass(frozen=True)
class NoiseSheet:
    increments: np.ndarray
    seed: int | None = None
    particle_id: int | None = None


def aggregate(fine: np.ndarray, rt: int, rx: int) -> np.ndarray:
    """Sum blocks of ``rt x rx`` fine cells into coarse cells (last two axes)."""
    *lead, nt, nx = fine.shape
    if nt % rt or nx % rx:
        raise ContractError(f"cannot aggregate shape {fine.shape} by ({rt}, {rx})")
    blocks = fine.reshape(*lead, nt // rt, rt, nx // rx, rx)
    return blocks.sum(axis=(-3, -1))


class NoiseStream:
    """Row-by-row noise for a set of particles.

    With ``refine = (rt, rx)`` the stream samples on a grid ``rt`` times finer
    in time and ``rx`` times finer in space and returns aggregated coarse
    cells, so runs on nested grids can share one underlying sheet.
    """

    def __init__(self, grid: SpaceTimeGrid, seed: int, particle_ids, refine=(1, 1)):
        self.grid = grid
        self.seed = int(seed)
        self.particle_ids = np.asarray(particle_ids, dtype=np.int64)
        self.rt, self.rx = (int(r) for r in refine)
        if self.rt < 1 or self.rx < 1:
            raise ConfigurationError("noise refinement factors must be >= 1")
        fine_dt = grid.dt / self.rt
        fine_dx = grid.dx / self.rx
        self._scale = np.sqrt(fine_dt * fine_dx)
        self._gens = [particle_generator(self.seed, int(p)) for p in self.particle_ids]
        self.rows_served = 0

    def next_rows(self, count: int, executor=None, workers: int = 1) -> np.ndarray:
        """Return the next ``count`` time rows as an ``(N, count, nx)`` array.

        With an executor the particles are split into ``workers`` contiguous
        chunks; each particle's stream is independent, so the output does not
        depend on the split.
        """
        if self.rows_served + count > self.grid.nt:
            raise ContractError("noise stream exhausted")
        n = len(self._gens)
        out = np.empty((n, count, self.grid.nx))
        if executor is not None and workers > 1 and n > 1:
            edges = np.linspace(0, n, min(workers, n) + 1).astype(int)
            list(executor.map(lambda ab: self._fill(out, count, *ab), zip(edges[:-1], edges[1:])))
        else:
            self._fill(out, count, 0, n)
        self.rows_served += count
        return out

    def _fill(self, out, count, lo, hi):
        nxf = self.grid.nx * self.rx
        for i in range(lo, hi):
            fine = self._gens[i].standard_normal((count * self.rt, nxf))
            fine *= self._scale
            out[i] = fine if self.rt == self.rx == 1 else aggregate(fine, self.rt, self.rx)


def sample_sheet(grid: SpaceTimeGrid, seed: int, particle_id: int, refine=(1, 1)) -> NoiseSheet:
    """Fresh Brownian-sheet increments, i.i.d. ``N(0, dt*dx)`` per cell."""
    stream = NoiseStream(grid, seed, [particle_id], refine)
    inc = stream.next_rows(grid.nt)[0]
    return NoiseSheet(inc, seed=int(seed), particle_id=int(particle_id))


@dataclass(frozen=True)
class DriftField:
    """Cell-averaged drift ``g``.

    Either ``values`` (an ``nt x nx`` matrix) or a constant ``c`` is given;
    the constant form is expanded lazily.
    """

    values: np.ndarray | None = None
    c: float | None = None
    descriptor: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if (self.values is None) == (self.c is None):
            raise ContractError("DriftField needs exactly one of values or c")
        if self.values is not None:
            vals = np.asarray(self.values, dtype=float)
            if vals.ndim != 2:
                raise ContractError("drift values must be an nt x nx matrix")
            if not np.all(np.isfinite(vals)):
                raise DataError("drift values must be finite")
            object.__setattr__(self, "values", vals)
        elif not np.isfinite(self.c):
            raise DataError("drift constant must be finite")

    @classmethod
    def constant(cls, c: float) -> DriftField:
        return cls(c=float(c), descriptor={"kind": "constant", "c": float(c)})

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, g, midpoint: bool = True) -> DriftField:
        """Sample ``g(t, x)`` at cell midpoints (or lower-left corners)."""
        off = 0.5 if midpoint else 0.0
        t = (np.arange(grid.nt) + off) * grid.dt
        x = (np.arange(grid.nx) + off) * grid.dx
        vals = np.asarray(g(t[:, None], x[None, :]), dtype=float) * np.ones((grid.nt, grid.nx))
        return cls(values=vals, descriptor={"kind": "function"})

    @classmethod
    def from_csv(cls, path) -> DriftField:
        vals = read_matrix_csv(path)
        return cls(values=vals, descriptor={"kind": "grid", "path": str(path)})

    def to_csv(self, path, grid: SpaceTimeGrid) -> None:
        write_matrix_csv(path, self.matrix(grid))

    def scaled(self, factor: float) -> DriftField:
        if self.c is not None:
            return DriftField.constant(self.c * factor)
        return DriftField(values=self.values * factor, descriptor={"kind": "scaled", "factor": factor,
                                                                  "base": self.descriptor})

    def matrix(self, grid: SpaceTimeGrid) -> np.ndarray:
        if self.c is not None:
            return np.full((grid.nt, grid.nx), self.c)
        self._check(grid)
        return self.values

    def row(self, n: int, grid: SpaceTimeGrid) -> np.ndarray:
        if self.c is not None:
            return np.full(grid.nx, self.c)
        self._check(grid)
        return self.values[n]

    def is_zero(self) -> bool:
        return self.c == 0.0 if self.c is not None else not np.any(self.values)

    def _check(self, grid: SpaceTimeGrid) -> None:
        if self.values.shape != (grid.nt, grid.nx):
            raise ContractError(f"drift shape {self.values.shape} does not match grid ({grid.nt}, {grid.nx})")


def entropy_of_drift(g: DriftField, grid: SpaceTimeGrid) -> float:
    """Relative entropy ``(1/2) sum g^2 dt dx`` of the Girsanov-shifted law."""
    vals = g.matrix(grid)
    if np.isnan(vals).any():
        raise DataError("drift contains NaN")
    return 0.5 * float(np.sum(vals * vals)) * grid.dt * grid.dx


def _check_sheet(sheet: NoiseSheet, grid: SpaceTimeGrid):
    if sheet.increments.shape != (grid.nt, grid.nx):
        raise ContractError(f"sheet shape {sheet.increments.shape} does not match grid ({grid.nt}, {grid.nx})")


def shift_sheet(sheet: NoiseSheet, g: DriftField, grid: SpaceTimeGrid) -> NoiseSheet:
    """Add the drift mass ``g dt dx`` to every cell (Q-sheet -> P-sheet)."""
    _check_sheet(sheet, grid)
    inc = sheet.increments + g.matrix(grid) * (grid.dt * grid.dx)
    return NoiseSheet(inc, sheet.seed, sheet.particle_id)


@dataclass(frozen=True)
class GirsanovDensity:
    log_m: np.ndarray

    @property
    def terminal(self) -> float:
        return float(np.exp(self.log_m[-1]))


def log_density(sheet_under_p: NoiseSheet, g: DriftField, grid: SpaceTimeGrid) -> GirsanovDensity:
    """Running ``log M_t = sum g dW - (1/2) sum g^2 dt dx`` over time rows."""
    _check_sheet(sheet_under_p, grid)
    gm = g.matrix(grid)
    per_row = np.sum(gm * sheet_under_p.increments, axis=1) - 0.5 * np.sum(gm * gm, axis=1) * grid.dt * grid.dx
    log_m = np.concatenate([[0.0], np.cumsum(per_row)])
    return GirsanovDensity(log_m)


def write_matrix_csv(path, matrix: np.ndarray, header: list[str] | None = None) -> None:
    """Numeric CSV: comma separated, LF endings, shortest round-trip floats."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if header is None:
        header = [f"c{j}" for j in range(matrix.shape[1])]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    """Inverse of :func:`write_matrix_csv`; a non-numeric first row is a header."""
    with open(Path(path), newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows:
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
    try:
        return np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(len(rows), -1)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric CSV entry ({exc})") from None
