"""Assembly of the forward problem shared by every propagator.

The diffusivity is ``scale * (nu0 + 10 + 0.25 x + 0.65 y + g(x))`` where ``g``
is a zero-mean squared-exponential Gaussian process; the kernel variance is
given in the units of the bracket, so the diffusivity field itself has
variance ``scale**2 * kernel_variance``. The calibration truth replaces ``g``
by ``x**3 + y**3``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import GpcBasis, build_basis
from .dbfe import DbfeOptions, DbfeProblem, DbfeState, init_state
from .pde import Grid2D, SourceSpec
from .randfield import BiorthParamField, KlDecomposition, SqExpKernel, biorth_param, kl_decompose, source_gpc_coeffs

TRUE_SOURCE = (0.2, -0.2)


@dataclass(frozen=True)
class ForwardConfig:
    nx: int = 101
    nu0: float = 0.0
    scale: float = 0.05
    kernel_variance: float = 0.3
    lengthscales: tuple[float, float] = (1.5, 1.5)
    n_modes: int = 5
    order: int = 2
    source: SourceSpec = field(default_factory=SourceSpec)
    kl_method: str = "auto"
    quad_level: int = 20

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("need at least one eigenfield")
        if self.order < 0:
            raise ValueError("chaos order must be non-negative")

    @property
    def dimension(self) -> int:
        return self.n_modes + 2


def prior_mean_diffusivity(grid: Grid2D, nu0: float = 0.0, scale: float = 0.05) -> np.ndarray:
    X, Y = grid.mesh
    return scale * (nu0 + 10.0 + 0.25 * X + 0.65 * Y)


def true_diffusivity(grid: Grid2D, nu0: float = 0.0, scale: float = 0.05) -> np.ndarray:
    X, Y = grid.mesh
    return scale * (nu0 + 10.0 + 0.25 * X + 0.65 * Y + X**3 + Y**3)


@dataclass
class ForwardSetup:
    config: ForwardConfig
    grid: Grid2D
    kernel: SqExpKernel
    kl: KlDecomposition
    basis: GpcBasis
    param: BiorthParamField
    source_coeffs: np.ndarray

    @property
    def source(self) -> SourceSpec:
        return self.config.source

    def dbfe_problem(self, options: DbfeOptions | None = None) -> DbfeProblem:
        return DbfeProblem(self.grid, self.param, self.source_coeffs, self.basis,
                           self.source.active_interval, options or DbfeOptions(), self.config.n_modes)

    def dbfe_initial(self, problem: DbfeProblem) -> DbfeState:
        return init_state(problem, self.kl)

    def diffusivity_samples(self, xi) -> np.ndarray:
        """Diffusivity realisations for xi of shape (..., N + 2)."""
        xi = np.asarray(xi, dtype=float)
        amp = np.sqrt(self.kl.eigenvalues) * xi[..., 2:]
        return self.kl.mean + np.einsum("...i,ixy->...xy", amp, self.kl.eigenfields)

    def source_locations(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return np.asarray(self.source.location_mean) + self.source.location_std * xi[..., :2]


def build_forward(config: ForwardConfig = ForwardConfig()) -> ForwardSetup:
    grid = Grid2D.square(config.nx)
    kernel = SqExpKernel(config.scale**2 * config.kernel_variance, tuple(config.lengthscales))
    mean = prior_mean_diffusivity(grid, config.nu0, config.scale)
    kl = kl_decompose(kernel, mean, grid, config.n_modes, method=config.kl_method)
    basis = build_basis(config.dimension, config.order)
    param = biorth_param(kl, basis, 2, config.n_modes)
    coeffs = source_gpc_coeffs(config.source, basis, grid, config.quad_level)
    return ForwardSetup(config, grid, kernel, kl, basis, param, coeffs)
