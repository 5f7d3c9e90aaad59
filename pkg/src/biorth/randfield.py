"""Gaussian random fields on the grid: kernels, discrete KL, and gPC projections."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .basis import GpcBasis, tensor_rule
from .pde import Grid2D, SourceSpec, source_field

EIG_CLIP = 1e-10


class DecompositionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SqExpKernel:
    """sigma^2 exp(-sum_i lambda_i (x1_i - x2_i)^2)."""

    variance: float
    lengthscales: tuple[float, ...] = (1.5, 1.5)

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("kernel variance must be non-negative")
        if any(not l > 0 for l in self.lengthscales):
            raise ValueError("kernel correlation parameters must be positive")

    def __call__(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        lam = np.asarray(self.lengthscales, dtype=float)
        return self.variance * np.exp(-np.sum(lam * (x1 - x2) ** 2, axis=-1))

    def matrix(self, a, b=None) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = a if b is None else np.asarray(b, dtype=float)
        return self(a[:, None, :], b[None, :, :])


def kernel_eval(kernel: SqExpKernel, x1, x2) -> float:
    return float(kernel(x1, x2))


def nystrom_eig(kernel: SqExpKernel, points, weights, n_modes: int):
    """Top eigenpairs of the quadrature-weighted kernel operator.

    Returns (eigenvalues, vectors) with vectors[:, i] orthonormal under
    ``sum(weights * v_i * v_j)``. Eigenvalues below EIG_CLIP (relative to
    the largest) are returned as zero.
    """
    points = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float).ravel()
    n = len(points)
    if not 0 <= n_modes <= n:
        raise ValueError(f"requested {n_modes} modes from {n} nodes")
    if n_modes == 0:
        return np.zeros(0), np.zeros((n, 0))
    sw = np.sqrt(w)
    A = sw[:, None] * kernel.matrix(points) * sw[None, :]
    try:
        vals, vecs = scipy.linalg.eigh(A, subset_by_index=(n - n_modes, n - 1))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DecompositionError(str(exc)) from exc
    vals = vals[::-1]
    vecs = vecs[:, ::-1] / sw[:, None]
    return _clip(vals), _fix_signs(vecs)


def _clip(vals: np.ndarray) -> np.ndarray:
    scale = max(float(np.max(np.abs(vals))) if len(vals) else 0.0, 1e-300)
    if np.any(vals < -EIG_CLIP * max(scale, 1.0)):
        raise DecompositionError(f"kernel matrix has a negative eigenvalue {vals.min():.3g}")
    return np.where(vals < EIG_CLIP * scale, 0.0, vals)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # make the largest-magnitude entry of each vector positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


@dataclass
class KlDecomposition:
    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenfields: np.ndarray  # (N, nx, ny)
    grid: Grid2D
    kernel: SqExpKernel
    warning: str | None = None

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def quadrature_weights(self) -> np.ndarray:
        return self.grid.weights

    def truncated(self, n: int) -> "KlDecomposition":
        if n > self.n_modes:
            raise ValueError(f"decomposition holds {self.n_modes} modes, {n} requested")
        return KlDecomposition(self.mean, self.eigenvalues[:n], self.eigenfields[:n], self.grid, self.kernel, self.warning)

    def pointwise_variance(self, n: int | None = None) -> np.ndarray:
        n = self.n_modes if n is None else n
        return np.einsum("i,ixy->xy", self.eigenvalues[:n], self.eigenfields[:n] ** 2)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "eigenvalues.csv", self.eigenvalues, delimiter=",", fmt="%.17g")
        np.savetxt(d / "mean.csv", self.mean, delimiter=",", fmt="%.17g")
        for i, f in enumerate(self.eigenfields):
            np.savetxt(d / f"eigenfield_{i + 1:03d}.csv", f, delimiter=",", fmt="%.17g")
        manifest = {
            "grid": self.grid.describe(),
            "N": self.n_modes,
            "kernel": {"variance": self.kernel.variance, "lengthscales": list(self.kernel.lengthscales)},
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "KlDecomposition":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        grid = Grid2D(**m["grid"])
        kernel = SqExpKernel(m["kernel"]["variance"], tuple(m["kernel"]["lengthscales"]))
        vals = np.atleast_1d(np.loadtxt(d / "eigenvalues.csv", delimiter=","))[: m["N"]]
        fields = np.array([np.loadtxt(d / f"eigenfield_{i + 1:03d}.csv", delimiter=",") for i in range(m["N"])])
        fields = fields.reshape((m["N"],) + grid.shape)
        mean = np.loadtxt(d / "mean.csv", delimiter=",").reshape(grid.shape)
        return cls(mean, vals, fields, grid, kernel)


def _kron_eig(kernel: SqExpKernel, grid: Grid2D, n_modes: int):
    """Same weighted eigenproblem, solved through the separable x/y structure."""
    lam = kernel.lengthscales
    wx = np.full(grid.nx, grid.h)
    wy = np.full(grid.ny, grid.h)
    wx[[0, -1]] *= 0.5
    wy[[0, -1]] *= 0.5
    ex, vx = nystrom_eig(SqExpKernel(1.0, (lam[0],)), grid.x[:, None], wx, grid.nx)
    ey, vy = nystrom_eig(SqExpKernel(1.0, (lam[1],)), grid.y[:, None], wy, grid.ny)
    prod = kernel.variance * np.outer(ex, ey)
    a, b = np.unravel_index(np.arange(prod.size), prod.shape)
    order = np.lexsort((b, a, -prod.ravel()))[:n_modes]
    vals = prod.ravel()[order]
    fields = vx[:, a[order]].T[:, :, None] * vy[:, b[order]].T[:, None, :]
    vecs = _fix_signs(fields.reshape(n_modes, -1).T)
    return _clip(vals), vecs


def kl_decompose(
    kernel: SqExpKernel,
    mean,
    grid: Grid2D,
    n_modes: int,
    method: str = "auto",
    rank_tol: float = 1e-10,
) -> KlDecomposition:
    """Discrete KL expansion of a Gaussian field with the given kernel on the grid.

    ``method`` is "dense" (full Nystrom eigensolve), "kron" (exploits the
    product form of the squared-exponential kernel on a tensor grid), or
    "auto" (dense up to 2500 nodes).
    """
    if n_modes > grid.size:
        raise ValueError(f"N={n_modes} exceeds the {grid.size} grid nodes")
    if method == "auto":
        method = "dense" if grid.size <= 2500 else "kron"
    if kernel.variance == 0:
        vals = np.zeros(n_modes)
        vecs = np.zeros((grid.size, n_modes))
        sw = np.sqrt(grid.weights.ravel())
        vecs[np.arange(n_modes), np.arange(n_modes)] = 1.0 / sw[:n_modes]
    elif method == "dense":
        vals, vecs = nystrom_eig(kernel, grid.points, grid.weights, n_modes)
    elif method == "kron":
        if len(kernel.lengthscales) != 2:
            raise ValueError("kron method needs one correlation parameter per axis")
        vals, vecs = _kron_eig(kernel, grid, n_modes)
    else:
        raise ValueError(f"unknown KL method {method!r}")

    msg = None
    positive = int(np.sum(vals > rank_tol * max(vals.max(initial=0.0), 1e-300)))
    if kernel.variance > 0 and positive < n_modes:
        msg = f"only {positive} of {n_modes} KL eigenvalues are numerically positive"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    fields = vecs.T.reshape((n_modes,) + grid.shape)
    return KlDecomposition(np.asarray(mean, dtype=float).copy(), vals, fields, grid, kernel, msg)


def reconstruct_cov_error(kl: KlDecomposition, kernel: SqExpKernel, grid: Grid2D, n_used: int) -> float:
    """Weighted Frobenius norm of C - sum_{i<n_used} lambda_i v_i v_i^T."""
    if n_used > kl.n_modes:
        raise ValueError("n_used exceeds available modes")
    sw = np.sqrt(grid.weights.ravel())
    C = kernel.matrix(grid.points)
    V = kl.eigenfields[:n_used].reshape(n_used, grid.size)
    R = C - (V.T * kl.eigenvalues[:n_used]) @ V
    return float(np.linalg.norm(sw[:, None] * R * sw[None, :]))


def sample_field(kl: KlDecomposition, n_modes: int, rng: np.random.Generator, chi=None) -> np.ndarray:
    if n_modes > kl.n_modes:
        raise ValueError("not enough KL modes")
    if chi is None:
        chi = rng.standard_normal(n_modes)
    chi = np.asarray(chi, dtype=float)
    amp = np.sqrt(kl.eigenvalues[:n_modes]) * chi
    return kl.mean + np.einsum("...i,ixy->...xy", amp, kl.eigenfields[:n_modes])


@dataclass
class BiorthParamField:
    """nu(x; xi) = mean(x) + sum_i sum_p V[i, p] psi_p(xi) v_i(x).

    ``modes`` are the unit-norm KL eigenfields and ``coeffs`` carries the
    sqrt(eigenvalue) scaling.
    """

    mean: np.ndarray
    modes: np.ndarray
    coeffs: np.ndarray
    basis: GpcBasis = field(repr=False)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def evaluate(self, xi) -> np.ndarray:
        amp = self.basis.evaluate(xi) @ self.coeffs.T  # (..., N)
        return self.mean + np.einsum("...i,ixy->...xy", amp, self.modes)

    def gpc_fields(self) -> np.ndarray:
        """Chaos coefficients of the diffusivity, one field per basis index."""
        out = np.einsum("ip,ixy->pxy", self.coeffs, self.modes)
        out[0] += self.mean
        return out

    def variance(self) -> np.ndarray:
        fields = self.gpc_fields()[1:]
        return np.einsum("p,pxy->xy", self.basis.norms_sq[1:], fields**2)


def biorth_param(kl: KlDecomposition, basis: GpcBasis, dim_offset: int, n_modes: int) -> BiorthParamField:
    if basis.dimension < dim_offset + n_modes:
        raise ValueError(f"basis dimension {basis.dimension} cannot host {n_modes} modes after offset {dim_offset}")
    if n_modes > kl.n_modes:
        raise ValueError("not enough KL modes")
    V = np.zeros((n_modes, basis.size))
    if basis.order >= 1:
        for i in range(n_modes):
            V[i, basis.first_order_index(dim_offset + i)] = np.sqrt(kl.eigenvalues[i])
    return BiorthParamField(kl.mean.copy(), kl.eigenfields[:n_modes].copy(), V, basis)


def _location_only(basis: GpcBasis, coords=(0, 1)) -> np.ndarray:
    others = [k for k in range(basis.dimension) if k not in coords]
    return ~np.any(basis.indices[:, others] > 0, axis=1) if others else np.ones(basis.size, dtype=bool)


def source_gpc_coeffs(src: SourceSpec, basis: GpcBasis, grid: Grid2D, quad_level: int = 20) -> np.ndarray:
    """Chaos coefficients S_p(x) of the uncertain-location source, shape (P, nx, ny).

    The location is z = mean + std * (xi_1, xi_2); projections use a tensor
    Gauss-Hermite rule over those two coordinates.
    """
    if quad_level < basis.order + 1:
        raise ValueError(f"quadrature level {quad_level} too low for order {basis.order}")
    out = np.zeros((basis.size,) + grid.shape)
    mean = np.asarray(src.location_mean, dtype=float)
    if src.location_std == 0:
        out[0] = source_field(src, mean, grid)
        return out
    if basis.dimension < 2:
        raise ValueError("source location needs two stochastic coordinates")
    nodes, weights = tensor_rule(quad_level, 2)
    S = source_field(src, mean + src.location_std * nodes, grid)  # (Q, nx, ny)
    xi = np.zeros((len(nodes), basis.dimension))
    xi[:, :2] = nodes
    psi = basis.evaluate(xi)  # (Q, P)
    mask = _location_only(basis)
    proj = (psi[:, mask] * weights[:, None]).T @ S.reshape(len(nodes), -1)
    out[mask] = (proj / basis.norms_sq[mask, None]).reshape((-1,) + grid.shape)
    return out
