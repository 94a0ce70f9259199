"""Dirichlet heat kernel on ``[0, 1]`` for the operator ``d/dt - d^2/dx^2``.

Two truncated representations are available:

* the image-charge series
  ``(4 pi t)^(-1/2) sum_n [exp(-(x-y+2n)^2/(4t)) - exp(-(x+y+2n)^2/(4t))]``,
  accurate for small ``t``;
* the eigenfunction series ``2 sum_n sin(n pi x) sin(n pi y) exp(-n^2 pi^2 t)``,
  accurate for large ``t``.

:func:`eval_kernel` picks one by comparing ``t`` with ``cfg.t_switch``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import ContractError, DomainError


@dataclass(frozen=True)
class HeatKernelConfig:
    """Truncation parameters for the kernel series.

    ``n_images`` image pairs (indices ``-n..n``) are used below ``t_switch``
    and ``n_modes`` sine modes above it.  With the defaults the two series
    agree to ``tol`` for every ``t >= 1e-4``.
    """

    n_images: int = 16
    n_modes: int = 256
    t_switch: float = 0.05
    tol: float = 1e-10

    def __post_init__(self):
        if self.n_images < 1 or self.n_modes < 1:
            raise DomainError("n_images and n_modes must be >= 1")
        if not self.t_switch > 0 or not self.tol > 0:
            raise DomainError("t_switch and tol must be positive")


DEFAULT_CONFIG = HeatKernelConfig()


def _check_args(t, x, y):
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("heat kernel requires t > 0")
    for name, v in (("x", x), ("y", y)):
        if np.any(~((v >= 0) & (v <= 1))):
            raise DomainError(f"heat kernel requires {name} in [0, 1]")
    return t, x, y


def image_series(t, x, y, n_images: int = DEFAULT_CONFIG.n_images) -> np.ndarray:
    """Image-charge series truncated to ``|n| <= n_images`` (no clamping)."""
    t, x, y = np.broadcast_arrays(*_check_args(t, x, y))
    d = x - y
    s = x + y
    four_t = 4.0 * t
    total = np.exp(-d * d / four_t) - np.exp(-s * s / four_t)
    # (n, -n) pairs are added together so that x <-> y symmetry is exact
    for n in range(1, n_images + 1):
        two_n = 2.0 * n
        total = total + (np.exp(-(d + two_n) ** 2 / four_t) + np.exp(-(d - two_n) ** 2 / four_t))
        total = total - (np.exp(-(s + two_n) ** 2 / four_t) + np.exp(-(s - two_n) ** 2 / four_t))
    return total / np.sqrt(np.pi * four_t)


def eigen_series(t, x, y, n_modes: int = DEFAULT_CONFIG.n_modes) -> np.ndarray:
    """Sine-mode series truncated to ``n_modes`` terms (no clamping)."""
    t, x, y = np.broadcast_arrays(*_check_args(t, x, y))
    total = np.zeros(t.shape)
    for n in range(1, n_modes + 1):
        npi = n * np.pi
        total = total + np.sin(npi * x) * np.sin(npi * y) * np.exp(-npi * npi * t)
    return 2.0 * total


def _finish(value, x, y, tol):
    value = np.where((value < 0) & (value >= -tol), 0.0, value)
    on_boundary = (x == 0) | (x == 1) | (y == 0) | (y == 1)
    return np.where(on_boundary, 0.0, value)


def eval_kernel(t, x, y, cfg: HeatKernelConfig = DEFAULT_CONFIG):
    """Evaluate ``G_t(x, y)``; broadcasts over array arguments.

    Negative round-off within ``cfg.tol`` of zero is clamped to zero and the
    kernel is exactly zero whenever ``x`` or ``y`` sits on the boundary.
    """
    t, x, y = np.broadcast_arrays(*_check_args(t, x, y))
    small = t < cfg.t_switch
    value = np.empty(t.shape)
    if np.any(small):
        value[small] = image_series(t[small], x[small], y[small], cfg.n_images)
    if np.any(~small):
        value[~small] = eigen_series(t[~small], x[~small], y[~small], cfg.n_modes)
    value = _finish(value, x, y, cfg.tol)
    return float(value) if value.ndim == 0 else value


def kernel_matrix(t: float, xs, ys, cfg: HeatKernelConfig = DEFAULT_CONFIG) -> np.ndarray:
    """``G_t(xs[i], ys[j])`` as a ``len(xs) x len(ys)`` matrix.

    Faster than :func:`eval_kernel` on an outer grid: above ``t_switch`` the
    eigenfunction series is a product of two sine matrices.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    _check_args(t, xs, ys)
    t = float(t)
    if t < cfg.t_switch:
        value = image_series(t, xs[:, None], ys[None, :], cfg.n_images)
    else:
        modes = np.arange(1, cfg.n_modes + 1) * np.pi
        sx = np.sin(np.outer(xs, modes))
        sy = np.sin(np.outer(ys, modes))
        value = 2.0 * (sx * np.exp(-modes * modes * t)) @ sy.T
    return _finish(value, xs[:, None], ys[None, :], cfg.tol)


def nash_aronson_bound(t, x, y):
    """The Gaussian majorant ``(2 pi t)^(-1/2) exp(-(x-y)^2 / (2t))``.

    This is the form usually quoted for the generator ``(1/2) d^2/dx^2``.  For
    the kernel of ``d^2/dx^2`` it fails when ``(x - y)^2 > 2 t log 2``; see
    :func:`free_gaussian_bound` for the majorant that does hold.
    """
    t, x, y = np.broadcast_arrays(*_check_args(t, x, y))
    return np.exp(-((x - y) ** 2) / (2.0 * t)) / np.sqrt(2.0 * np.pi * t)


def free_gaussian_bound(t, x, y):
    """Whole-line heat kernel ``(4 pi t)^(-1/2) exp(-(x-y)^2 / (4t))``.

    Dominates the Dirichlet kernel by the maximum principle.
    """
    t, x, y = np.broadcast_arrays(*_check_args(t, x, y))
    return np.exp(-((x - y) ** 2) / (4.0 * t)) / np.sqrt(4.0 * np.pi * t)


def kernel_row_integrals(t: float, x: float, cfg: HeatKernelConfig = DEFAULT_CONFIG,
                         quad_n: int = 1024) -> tuple[float, float]:
    """Trapezoid estimates of ``int G_t(x,y) dy`` and ``int G_t(x,y)^2 dy``.

    ``quad_n`` is the number of equispaced nodes on ``[0, 1]``.
    """
    if not t > 0:
        raise DomainError("kernel_row_integrals requires t > 0")
    if quad_n < 64:
        raise DomainError("quad_n must be >= 64")
    ys = np.linspace(0.0, 1.0, quad_n)
    row = kernel_matrix(t, np.array([x]), ys, cfg)[0]
    mass = integrate.trapezoid(row, ys)
    l2 = integrate.trapezoid(row * row, ys)
    return float(mass), float(l2)


def quadrature_weights(n_nodes: int, rule: str = "trapezoid") -> np.ndarray:
    """Weights on ``n_nodes`` equispaced nodes of ``[0, 1]``."""
    h = 1.0 / (n_nodes - 1)
    if rule == "trapezoid":
        w = np.full(n_nodes, h)
        w[[0, -1]] = h / 2
        return w
    if rule == "simpson":
        if (n_nodes - 1) % 2:
            raise ContractError("simpson rule needs an even number of intervals")
        w = np.full(n_nodes, 2.0)
        w[1::2] = 4.0
        w[[0, -1]] = 1.0
        return w * h / 3
    raise ContractError(f"unknown quadrature rule {rule!r}")


@lru_cache(maxsize=256)
def _propagator(dt: float, n_nodes: int, cfg: HeatKernelConfig, rule: str) -> np.ndarray:
    xs = np.linspace(0.0, 1.0, n_nodes)
    mat = kernel_matrix(dt, xs, xs, cfg) * quadrature_weights(n_nodes, rule)[None, :]
    mat.flags.writeable = False
    return mat


def heat_propagate(field, dt: float, cfg: HeatKernelConfig = DEFAULT_CONFIG,
                   rule: str = "trapezoid") -> np.ndarray:
    """Apply the heat semigroup for time ``dt`` by kernel quadrature.

    ``field`` holds values on equispaced nodes of ``[0, 1]`` (endpoints
    included) and must vanish at both endpoints.
    """
    if not dt > 0:
        raise DomainError("heat_propagate requires dt > 0")
    field = np.asarray(field, dtype=float)
    if field.ndim != 1 or field.size < 3:
        raise ContractError("field must be a 1-D array with at least 3 nodes")
    if field[0] != 0 or field[-1] != 0:
        raise ContractError("field must vanish at both endpoints")
    out = _propagator(float(dt), field.size, cfg, rule) @ field
    out[0] = 0.0
    out[-1] = 0.0
    return out
