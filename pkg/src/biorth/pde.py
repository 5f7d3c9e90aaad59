"""Finite-difference transient diffusion on a uniform node-centred 2D grid.

Fields are numpy arrays whose last two axes are (nx, ny); any leading axes are
treated as a batch, so one call can apply the operator to a stack of fields.
Zero-flux boundaries use mirror ghost nodes, which is the same as giving the
boundary nodes half control volumes. The discrete operator is therefore
conservative and self-adjoint with respect to the trapezoidal node weights
returned by :meth:`Grid2D.weights`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np


class NonPositiveDiffusivity(ValueError):
    pass


class StepFailure(RuntimeError):
    def __init__(self, t: float, stage: int):
        super().__init__(f"non-finite state at t={t:.6g} (RK4 stage {stage})")
        self.t = t
        self.stage = stage


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    h: float
    x0: float = -1.0
    y0: float = -1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 nodes per direction")
        if not self.h > 0:
            raise ValueError("grid spacing must be positive")

    @classmethod
    def square(cls, n: int, lo: float = -1.0, hi: float = 1.0) -> "Grid2D":
        return cls(n, n, (hi - lo) / (n - 1), lo, lo)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @cached_property
    def x(self) -> np.ndarray:
        return self.x0 + self.h * np.arange(self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return self.y0 + self.h * np.arange(self.ny)

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    @cached_property
    def points(self) -> np.ndarray:
        X, Y = self.mesh
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights (h^2 inside, halved per boundary side)."""
        wx = np.full(self.nx, self.h)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.h)
        wy[[0, -1]] *= 0.5
        return np.outer(wx, wy)

    def inner(self, a, b) -> np.ndarray:
        """Weighted inner product over the last two axes."""
        return np.einsum("...ij,...ij->...", a * self.weights, b)

    def integrate(self, a) -> np.ndarray:
        return np.einsum("...ij,ij->...", a, self.weights)

    def nearest_node(self, point) -> tuple[int, int]:
        i = int(round((point[0] - self.x0) / self.h))
        j = int(round((point[1] - self.y0) / self.h))
        return min(max(i, 0), self.nx - 1), min(max(j, 0), self.ny - 1)

    def describe(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "h": self.h, "x0": self.x0, "y0": self.y0}


@dataclass
class GridField:
    """A scalar field sampled on a grid, carrying its geometry for export."""

    values: np.ndarray
    grid: Grid2D
    t: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")


def face_diffusivity(nu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic averages of adjacent nodal values on x- and y-faces."""
    nu = np.asarray(nu, dtype=float)
    return 0.5 * (nu[..., 1:, :] + nu[..., :-1, :]), 0.5 * (nu[..., :, 1:] + nu[..., :, :-1])


def gradients(u: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    return np.diff(u, axis=-2) / h, np.diff(u, axis=-1) / h


def divergence(fx: np.ndarray, fy: np.ndarray, h: float) -> np.ndarray:
    """Discrete divergence of face fluxes with zero flux through the boundary."""
    shape = np.broadcast_shapes(fx.shape[:-2], fy.shape[:-2]) + (fx.shape[-2] + 1, fy.shape[-1] + 1)
    out = np.empty(shape)
    out[..., 1:-1, :] = fx[..., 1:, :] - fx[..., :-1, :]
    out[..., 0, :] = 2.0 * fx[..., 0, :]
    out[..., -1, :] = -2.0 * fx[..., -1, :]
    dy = np.empty(shape)
    dy[..., :, 1:-1] = fy[..., :, 1:] - fy[..., :, :-1]
    dy[..., :, 0] = 2.0 * fy[..., :, 0]
    dy[..., :, -1] = -2.0 * fy[..., :, -1]
    out += dy
    out /= h
    return out


def check_positive(nu: np.ndarray, grid: Grid2D | None = None) -> None:
    bad = np.argwhere(~(np.asarray(nu) > 0))
    if len(bad):
        node = tuple(int(v) for v in bad[0])
        where = ""
        if grid is not None:
            i, j = node[-2:]
            where = f" at x=({grid.x[i]:.4g}, {grid.y[j]:.4g})"
        raise NonPositiveDiffusivity(f"diffusivity {np.asarray(nu)[node]:.4g} <= 0 at node {node}{where}")


def diffusion_apply(nu, u, h: float, check: bool = True) -> np.ndarray:
    """div(nu grad u) in conservative flux form.

    ``check=False`` skips the positivity test so signed coefficient fields
    (for example diffusivity modes) can be pushed through the same stencil.
    """
    if check:
        check_positive(nu)
    nux, nuy = face_diffusivity(nu)
    gx, gy = gradients(np.asarray(u, dtype=float), h)
    return divergence(nux * gx, nuy * gy, h)


def boundary_flux(nu, u, grid: Grid2D) -> np.ndarray:
    """Net outward flux through the boundary, by the discrete divergence theorem."""
    return grid.integrate(diffusion_apply(nu, u, grid.h, check=False))


@dataclass(frozen=True)
class SourceSpec:
    location_mean: tuple[float, float] = (0.0, 0.0)
    location_std: float = 0.3
    strength: float = 1.0
    width: float = 0.1
    active_interval: tuple[float, float] = (0.0, 0.01)

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("source width must be positive")
        if self.location_std < 0:
            raise ValueError("source location std must be non-negative")
        if self.active_interval[0] > self.active_interval[1]:
            raise ValueError("source switches off before it switches on")


def source_field(src: SourceSpec, z, grid: Grid2D) -> np.ndarray:
    """Gaussian bump s / (2 pi w^2) exp(-|z - x|^2 / (2 w^2)); ``z`` may be a batch (..., 2)."""
    z = np.asarray(z, dtype=float)
    X, Y = grid.mesh
    dx = X - z[..., 0, None, None]
    dy = Y - z[..., 1, None, None]
    w2 = src.width**2
    return src.strength / (2 * math.pi * w2) * np.exp(-(dx * dx + dy * dy) / (2 * w2))


def _axpy(a, x, y):
    """y + a*x for arrays or tuples of arrays."""
    if isinstance(y, tuple):
        return tuple(_axpy(a, xi, yi) for xi, yi in zip(x, y))
    return y + a * x


def _finite(x) -> bool:
    if isinstance(x, tuple):
        return all(_finite(v) for v in x)
    return bool(np.all(np.isfinite(x)))


def rk4_step(state, rhs: Callable, t: float, dt: float):
    """Classical RK4 step; ``state`` is an array or a tuple of arrays."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = rhs(t, state)
    if not _finite(k1):
        raise StepFailure(t, 1)
    k2 = rhs(t + dt / 2, _axpy(dt / 2, k1, state))
    if not _finite(k2):
        raise StepFailure(t, 2)
    k3 = rhs(t + dt / 2, _axpy(dt / 2, k2, state))
    if not _finite(k3):
        raise StepFailure(t, 3)
    k4 = rhs(t + dt, _axpy(dt, k3, state))
    if not _finite(k4):
        raise StepFailure(t, 4)
    incr = _axpy(2.0, k2, k1)
    incr = _axpy(2.0, k3, incr)
    incr = _axpy(1.0, k4, incr)
    out = _axpy(dt / 6, incr, state)
    if not _finite(out):
        raise StepFailure(t, 5)
    return out


def step_count(t: float, dt: float, what: str = "time") -> int:
    """Number of steps of size dt reaching t; raises if dt does not divide t."""
    ratio = t / dt
    n = int(round(ratio))
    if abs(ratio - n) > 1e-8 * max(1.0, abs(ratio)):
        raise ValueError(f"{what} {t} is not a multiple of dt={dt}")
    return n


def source_window(src: SourceSpec, dt: float) -> tuple[int, int]:
    """Half-open range of step numbers during which the source is switched on."""
    on = step_count(src.active_interval[0], dt, "source on-time")
    off = step_count(src.active_interval[1], dt, "source off-time")
    return on, off


def solve_deterministic(
    nu: np.ndarray,
    src: SourceSpec,
    z,
    grid: Grid2D,
    t_end: float,
    dt: float,
    record_times: Sequence[float] = (),
    check: bool = True,
) -> dict[float, np.ndarray]:
    """Integrate du/dt = div(nu grad u) + S from u = 0.

    ``nu`` may carry leading batch axes together with ``z`` of shape
    (..., 2), in which case every realisation is integrated in lockstep.
    Returns snapshots keyed by the requested record times (t_end always
    included).
    """
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if check:
        check_positive(nu, grid)
    nu = np.asarray(nu, dtype=float)
    n_end = step_count(t_end, dt, "t_end") if t_end > 0 else 0
    wanted = {step_count(t, dt, "record time"): t for t in record_times}
    wanted[n_end] = t_end
    on, off = source_window(src, dt)

    nux, nuy = face_diffusivity(nu)
    S = source_field(src, z, grid)
    batch = np.broadcast_shapes(nu.shape[:-2], S.shape[:-2])
    u = np.zeros(batch + grid.shape)
    h = grid.h

    def operator(t, v):
        gx, gy = gradients(v, h)
        return divergence(nux * gx, nuy * gy, h)

    def forced(t, v):
        return operator(t, v) + S

    out: dict[float, np.ndarray] = {}
    if 0 in wanted:
        out[wanted[0]] = u.copy()
    for n in range(n_end):
        rhs = forced if on <= n < off else operator
        t = n * dt
        u = rk4_step(u, rhs, t, dt)
        if n + 1 in wanted:
            out[wanted[n + 1]] = u.copy()
    return out
