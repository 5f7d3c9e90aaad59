"""Dynamically bi-orthogonal field equations for the stochastic diffusion problem.

The solution is carried as

    u(x, t; xi) = mean(x, t) + sum_i sum_p Y[i, p](t) psi_p(xi) u_i(x, t)

with orthonormal eigenfields u_i (dynamically orthogonal: du_i/dt is kept
orthogonal to every u_j) and a Hermite chaos expansion of each stochastic
coefficient. Mean, eigenfields and the N x P coefficient matrix are stepped
together with RK4.

Internally the right-hand side never forms the P chaos coefficients of the
operator. Writing the diffusivity as nu = nu_0 + sum_i nu_i (.) and the
solution as u_0 + sum_j u_j (.), every term of the projected operator is a
combination of the (N+1)^2 fields div(nu_a grad u_b); only inner products
of those fields with the eigenfields and a handful of combinations are
needed, which is what keeps the cost at N+1 PDEs plus N x P ODEs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import GpcBasis, build_basis
from .pde import (
    Grid2D,
    StepFailure,
    divergence,
    face_diffusivity,
    gradients,
    rk4_step,
    step_count,
)
from .randfield import BiorthParamField, KlDecomposition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DbfeOptions:
    """``inverse`` is "pinv" (eigen-truncated pseudo-inverse of the coefficient
    covariance) or "tikhonov" (Gamma + eps * trace(Gamma)/N * I).

    ``max_rotation`` bounds, per step, how far each eigendirection of the
    coefficient covariance may turn (weighted norm of dt * du/dt). Directions
    with very little variance otherwise get velocities ~ 1 / variance, which
    an explicit step cannot follow. None disables the bound.
    """

    inverse: str = "pinv"
    rank_tol: float = 1e-10
    tikhonov_eps: float = 1e-10
    reorthonormalize: bool = True
    activate_modes: bool = True
    max_rotation: float | None = 0.25

    def __post_init__(self):
        if self.inverse not in ("pinv", "tikhonov"):
            raise ValueError(f"unknown covariance inverse {self.inverse!r}")


@dataclass
class DbfeProblem:
    grid: Grid2D
    param: BiorthParamField
    source_coeffs: np.ndarray  # (P, nx, ny)
    basis: GpcBasis
    source_interval: tuple[float, float] = (0.0, 0.01)
    options: DbfeOptions = field(default_factory=DbfeOptions)
    n_modes: int | None = None

    def __post_init__(self):
        if self.n_modes is None:
            self.n_modes = self.param.n_modes
        if self.source_coeffs.shape != (self.basis.size,) + self.grid.shape:
            raise ValueError("source coefficients must hold one field per basis term")
        if self.param.coeffs.shape[1] != self.basis.size:
            raise ValueError("parameter field and solver use different chaos bases")
        n = self.basis.norms_sq
        # nu_a stack: mean diffusivity then its unit modes
        self._nu_faces = face_diffusivity(np.concatenate([self.param.mean[None], self.param.modes]))
        # M[i, q, r] = sum_p V[i, p] <psi_p psi_q psi_r> / <psi_r^2>
        self._M = np.array([self.basis.contract(v) / n[None, :] for v in self.param.coeffs]).reshape(
            self.param.n_modes, self.basis.size, self.basis.size
        )
        self._face_w = _face_weights(self.grid)
        active = np.flatnonzero(np.any(self.source_coeffs != 0, axis=(1, 2)))
        self._src_idx = active
        self._src = self.source_coeffs[active]

    @property
    def stochastic_dimension(self) -> int:
        return self.basis.dimension


@dataclass
class DbfeState:
    t: float
    mean: np.ndarray
    eigenfields: np.ndarray  # (N, nx, ny)
    coeffs: np.ndarray  # (N, P)
    basis: GpcBasis = field(repr=False)

    @property
    def n_modes(self) -> int:
        return len(self.eigenfields)

    def as_tuple(self):
        return (self.mean, self.eigenfields, self.coeffs)

    def with_arrays(self, t, arrays) -> "DbfeState":
        return DbfeState(t, arrays[0], arrays[1], arrays[2], self.basis)

    def save(self, directory, extra: dict | None = None) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "mean.csv", self.mean, delimiter=",", fmt="%.17g")
        for i, u in enumerate(self.eigenfields):
            np.savetxt(d / f"eigenfield_{i + 1:03d}.csv", u, delimiter=",", fmt="%.17g")
        np.savetxt(d / "coeffs.csv", self.coeffs, delimiter=",", fmt="%.17g")
        manifest = {
            "t": self.t,
            "N": self.n_modes,
            "P": self.basis.size,
            "basis": {"dimension": self.basis.dimension, "order": self.basis.order},
            "shape": list(self.mean.shape),
        }
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory, basis: GpcBasis | None = None) -> "DbfeState":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        if basis is None:
            basis = build_basis(m["basis"]["dimension"], m["basis"]["order"])
        shape = tuple(m["shape"])
        mean = np.loadtxt(d / "mean.csv", delimiter=",").reshape(shape)
        fields = np.array([np.loadtxt(d / f"eigenfield_{i + 1:03d}.csv", delimiter=",") for i in range(m["N"])])
        coeffs = np.loadtxt(d / "coeffs.csv", delimiter=",", ndmin=2).reshape(m["N"], m["P"])
        return cls(m["t"], mean, fields.reshape((m["N"],) + shape), coeffs, basis)


def init_state(problem: DbfeProblem, kl: KlDecomposition) -> DbfeState:
    """Zero mean, eigenfields from the diffusivity KL modes, zero coefficients."""
    N = problem.n_modes
    if kl.n_modes < N:
        raise ValueError(f"KL supplies {kl.n_modes} modes, problem needs {N}")
    return DbfeState(
        0.0,
        np.zeros(problem.grid.shape),
        kl.eigenfields[:N].copy(),
        np.zeros((N, problem.basis.size)),
        problem.basis,
    )


# ---------------------------------------------------------------------------
# right-hand side pieces


def _pair_fields(problem: DbfeProblem, mean, eigenfields) -> np.ndarray:
    """A[a, b] = div(nu_a grad u_b) with a, b running over (mean, modes)."""
    u = np.concatenate([mean[None], eigenfields])
    gx, gy = gradients(u, problem.grid.h)
    nux, nuy = problem._nu_faces
    return divergence(nux[:, None] * gx[None], nuy[:, None] * gy[None], problem.grid.h)


def _coefficient_tensor(problem: DbfeProblem, Y: np.ndarray) -> np.ndarray:
    """K[a, b, r]: chaos coefficient r of the factor multiplying A[a, b]."""
    Nv = problem.param.n_modes
    N, P = Y.shape
    K = np.zeros((Nv + 1, N + 1, P))
    K[0, 0, 0] = 1.0
    K[0, 1:] = Y
    K[1:, 0] = problem.param.coeffs
    if Nv:
        K[1:, 1:] = np.einsum("jq,iqr->ijr", Y, problem._M)
    return K


def galerkin_rhs(problem: DbfeProblem, state: DbfeState, source_on: bool = True) -> np.ndarray:
    """Chaos coefficients L_q(x) of the operator, shape (P, nx, ny)."""
    A = _pair_fields(problem, state.mean, state.eigenfields)
    K = _coefficient_tensor(problem, state.coeffs)
    L = np.einsum("abr,abxy->rxy", K, A)
    if source_on:
        L = L + problem.source_coeffs
    return L


def rhs_mean(problem: DbfeProblem, state: DbfeState, source_on: bool = True) -> np.ndarray:
    return galerkin_rhs(problem, state, source_on)[0]


def cov_Y(state: DbfeState) -> np.ndarray:
    n = state.basis.norms_sq
    Y = state.coeffs[:, 1:]
    return (Y * n[1:]) @ Y.T


def _solve_cov(problem: DbfeProblem, gamma: np.ndarray, D: np.ndarray, rate_cap: float | None = None) -> np.ndarray:
    """Gamma^-1 D with the configured handling of (near) singular Gamma.

    With ``rate_cap`` the component of the result along each eigenvector of
    Gamma is scaled down so its weighted norm does not exceed the cap.
    """
    N = len(gamma)
    opts = problem.options
    vals, vecs = np.linalg.eigh(gamma)
    top = vals.max(initial=0.0)
    if opts.inverse == "tikhonov":
        eps = opts.tikhonov_eps * np.trace(gamma) / max(N, 1)
        if eps == 0:
            return np.zeros_like(D)
        inv = 1.0 / (vals + eps)
    else:
        if top <= 0:
            return np.zeros_like(D)
        inv = np.where(vals > opts.rank_tol * top, 1.0 / np.where(vals > 0, vals, 1.0), 0.0)
    C = np.tensordot(vecs.T, D, axes=1) * inv[:, None, None]
    if rate_cap is not None:
        norms = np.sqrt(np.einsum("kxy,kxy->k", C * problem.grid.weights, C))
        C *= np.minimum(1.0, rate_cap / np.maximum(norms, 1e-300))[:, None, None]
    return np.tensordot(vecs, C, axes=1)


def _project_out(grid: Grid2D, F: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Remove the span of the eigenfields U from each field in F."""
    c = np.tensordot(F * grid.weights, U, axes=([1, 2], [1, 2]))
    return F - np.tensordot(c, U, axes=1)


def rhs_eigenfields(problem: DbfeProblem, state: DbfeState, L: np.ndarray) -> np.ndarray:
    """du_j/dt from Gamma U = D, D_j = E[L Y_j] minus its projection on the eigenfields."""
    n = state.basis.norms_sq
    Y = state.coeffs
    ELY = np.tensordot(Y[:, 1:] * n[1:], L[1:], axes=1)
    D = _project_out(problem.grid, ELY, state.eigenfields)
    dU = _solve_cov(problem, cov_Y(state), D)
    return _project_out(problem.grid, dU, state.eigenfields)


def rhs_coeffs(problem: DbfeProblem, state: DbfeState, L: np.ndarray) -> np.ndarray:
    dY = np.tensordot(state.eigenfields * problem.grid.weights, L, axes=([1, 2], [1, 2]))
    dY[:, 0] = 0.0
    return dY


def _face_weights(grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    """Weights turning <div F, u> into -sum over faces of F . grad u."""
    wx = np.full(grid.nx, grid.h)
    wy = np.full(grid.ny, grid.h)
    wx[[0, -1]] *= 0.5
    wy[[0, -1]] *= 0.5
    return grid.h * np.broadcast_to(wy, (grid.nx - 1, grid.ny)), grid.h * np.broadcast_to(wx[:, None], (grid.nx, grid.ny - 1))


def dbfe_rhs(problem: DbfeProblem, mean, U, Y, source_on: bool, rate_cap: float | None = None):
    """Full coupled right-hand side (d mean, d eigenfields, d coeffs).

    Mathematically identical to assembling galerkin_rhs and feeding it to
    rhs_mean / rhs_eigenfields / rhs_coeffs. Projections onto eigenfields
    use discrete summation by parts, so only the N + 1 fields E[L] and
    E[L Y_j] ever go through the divergence.
    """
    grid = problem.grid
    h = grid.h
    w = grid.weights
    n = problem.basis.norms_sq
    N = len(U)
    nux, nuy = problem._nu_faces
    fwx, fwy = problem._face_w
    u = np.concatenate([mean[None], U])
    gx, gy = gradients(u, h)
    na, nb = len(nux), len(u)

    # H[a, b, i] = -<div(nu_a grad u_b), u_i>, by summation by parts
    Fx, Fy = gx[0].size, gy[0].size
    gx2 = gx.reshape(nb, Fx)
    gy2 = gy.reshape(nb, Fy)
    nwx = (nux * fwx).reshape(na, 1, Fx)
    nwy = (nuy * fwy).reshape(na, 1, Fy)
    H = (nwx * gx2).reshape(na * nb, Fx) @ gx2[1:].T + (nwy * gy2).reshape(na * nb, Fy) @ gy2[1:].T
    G2 = -H

    K = _coefficient_tensor(problem, Y)
    K2 = K.reshape(na * nb, -1)
    dY = K2.T @ G2  # (P, N)
    Yn = Y * n
    Yn[:, 0] = 0.0
    W = np.concatenate([K2[:, :1].T, Yn @ K2.T]).reshape(N + 1, na, nb)  # row 0: mean, rows 1..: E[L Y_j]
    ELY_U = W[1:].reshape(N, -1) @ G2

    # flux of row c: sum_a nu_a sum_b W[c, a, b] grad u_b
    Wf = W.reshape((N + 1) * na, nb)
    fx = np.einsum("caf,af->cf", (Wf @ gx2).reshape(N + 1, na, Fx), nux.reshape(na, Fx)).reshape((N + 1,) + gx.shape[1:])
    fy = np.einsum("caf,af->cf", (Wf @ gy2).reshape(N + 1, na, Fy), nuy.reshape(na, Fy)).reshape((N + 1,) + gy.shape[1:])
    out = divergence(fx, fy, h)
    dmean = out[0]
    ELY = out[1:]
    if source_on and len(problem._src_idx):
        S = problem._src
        S2 = S.reshape(len(S), -1)
        idx = problem._src_idx
        SU = S2 @ (U * w).reshape(N, -1).T  # (Ps, N)
        dY[idx] += SU
        ELY = ELY + np.tensordot(Yn[:, idx], S, axes=1)
        ELY_U += Yn[:, idx] @ SU
        if idx[0] == 0:
            dmean = dmean + S[0]
    dY = dY.T
    dY[:, 0] = 0.0

    D = ELY - np.tensordot(ELY_U, U, axes=1)
    gamma = (Y[:, 1:] * n[1:]) @ Y[:, 1:].T
    dU = _solve_cov(problem, gamma, D, rate_cap)
    dU = _project_out(grid, dU, U)
    return dmean, dU, dY


def orthonormality_error(grid: Grid2D, U: np.ndarray) -> float:
    G = np.tensordot(U * grid.weights, U, axes=([1, 2], [1, 2]))
    return float(np.max(np.abs(G - np.eye(len(U))))) if len(U) else 0.0


def reorthonormalize(grid: Grid2D, U: np.ndarray, Y: np.ndarray):
    """Modified Gram-Schmidt on the eigenfields; returns (Q, R @ Y) so that
    sum_i Y_i u_i is unchanged."""
    N = len(U)
    Q = U.copy()
    R = np.zeros((N, N))
    w = grid.weights
    for k in range(N):
        for j in range(k):
            R[j, k] = np.sum(w * Q[j] * Q[k])
            Q[k] -= R[j, k] * Q[j]
        R[k, k] = np.sqrt(np.sum(w * Q[k] * Q[k]))
        if R[k, k] == 0:
            raise FloatingPointError(f"eigenfield {k} collapsed during re-orthonormalisation")
        Q[k] /= R[k, k]
    return Q, R @ Y


def activate_modes(problem: DbfeProblem, state: DbfeState, source_on: bool) -> DbfeState:
    """Re-seat eigenfields that carry no variance.

    With zero coefficient covariance the eigenfield velocity Gamma^-1 D is
    singular (it grows like 1/t from a zero start). The limit of the
    dynamically orthogonal flow as the variance vanishes aligns those modes
    with the dominant directions of the stochastic forcing not yet resolved
    by the active modes, so they are placed there directly. Their
    coefficients are zero, so the represented field does not change.
    """
    N = state.n_modes
    if N == 0:
        return state
    gamma = cov_Y(state)
    vals, Q = np.linalg.eigh(gamma)
    top = vals.max(initial=0.0)
    null = vals <= problem.options.rank_tol * top if top > 0 else np.ones(N, dtype=bool)
    if not null.any():
        return state
    order = np.argsort(-vals, kind="stable")
    Q, null = Q[:, order], null[order]
    rotated = rotate(state, Q)
    U = rotated.eigenfields.copy()
    Y = rotated.coeffs.copy()
    Y[null] = 0.0
    active = U[~null]

    grid = problem.grid
    L = galerkin_rhs(problem, DbfeState(state.t, state.mean, active, Y[~null], state.basis), source_on)
    F = L[1:] * np.sqrt(state.basis.norms_sq[1:])[:, None, None]
    if len(active):
        F = _project_out(grid, F, active)
    sw = np.sqrt(grid.weights)
    B = (F * sw).reshape(len(F), -1).T
    left, sing, _ = np.linalg.svd(B, full_matrices=False)
    k = int(null.sum())
    significant = sing > problem.options.rank_tol * max(sing.max(initial=0.0), 1e-300)
    take = min(k, int(significant.sum()))
    fresh = [(left[:, i].reshape(grid.shape) / sw) for i in range(take)]
    # keep the previous directions for modes with nothing to align to
    leftovers = [u for u in U[null][take:]]
    U_new = np.array(list(active) + fresh + leftovers) if N else U
    Y_new = np.concatenate([Y[~null], np.zeros((k, Y.shape[1]))])
    U_new, Y_new = reorthonormalize(grid, U_new, Y_new)
    log.debug("t=%.5g activated %d of %d null modes", state.t, take, k)
    return DbfeState(state.t, state.mean, U_new, Y_new, state.basis)


@dataclass
class Diagnostics:
    orthonormality: list[float] = field(default_factory=list)
    do_residual: list[float] = field(default_factory=list)
    constant_column: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        def top(v):
            return max(v) if v else 0.0

        return {
            "max_orthonormality_drift": top(self.orthonormality),
            "max_do_residual": top(self.do_residual),
            "max_constant_column": top(self.constant_column),
        }


def step(problem: DbfeProblem, state: DbfeState, dt: float, source_on: bool | None = None,
         diagnostics: Diagnostics | None = None) -> DbfeState:
    """One RK4 step of the coupled system, optionally re-orthonormalising after."""
    if source_on is None:
        t_on, t_off = problem.source_interval
        on, off = step_count(t_on, dt), step_count(t_off, dt)
        n = int(round(state.t / dt))
        source_on = on <= n < off

    if problem.options.activate_modes:
        state = activate_modes(problem, state, source_on)

    cap = problem.options.max_rotation / dt if problem.options.max_rotation else None

    def rhs(t, s):
        return dbfe_rhs(problem, s[0], s[1], s[2], source_on, cap)

    if diagnostics is not None:
        dU = dbfe_rhs(problem, *state.as_tuple(), source_on)[1]
        proj = np.tensordot(dU * problem.grid.weights, state.eigenfields, axes=([1, 2], [1, 2]))
        diagnostics.do_residual.append(float(np.max(np.abs(proj))) if proj.size else 0.0)
    try:
        mean, U, Y = rk4_step(state.as_tuple(), rhs, state.t, dt)
    except StepFailure as exc:
        raise StepFailure(state.t, exc.stage) from None
    drift = orthonormality_error(problem.grid, U)
    if problem.options.reorthonormalize:
        U, Y = reorthonormalize(problem.grid, U, Y)
    if diagnostics is not None:
        diagnostics.orthonormality.append(drift if not problem.options.reorthonormalize
                                          else orthonormality_error(problem.grid, U))
        diagnostics.constant_column.append(float(np.max(np.abs(Y[:, 0]))) if Y.size else 0.0)
    log.debug("t=%.5g orthonormality drift before MGS %.3g", state.t + dt, drift)
    return DbfeState(state.t + dt, mean, U, Y, state.basis)


def propagate(problem: DbfeProblem, state: DbfeState, t_end: float, dt: float,
              record_times=(), diagnostics: Diagnostics | None = None) -> dict[float, DbfeState]:
    """Step from state.t to t_end; returns the states at the record times and t_end."""
    n0 = step_count(state.t, dt) if state.t else 0
    n_end = step_count(t_end, dt)
    wanted = {step_count(t, dt, "record time"): t for t in record_times}
    wanted[n_end] = t_end
    on = step_count(problem.source_interval[0], dt)
    off = step_count(problem.source_interval[1], dt)
    out = {}
    if n0 in wanted:
        out[wanted[n0]] = state
    for n in range(n0, n_end):
        state = step(problem, state, dt, on <= n < off, diagnostics)
        state.t = (n + 1) * dt
        if n + 1 in wanted:
            out[wanted[n + 1]] = state
    return out


# ---------------------------------------------------------------------------
# using the expansion


def evaluate_expansion(state: DbfeState, xi) -> np.ndarray:
    """mean + sum_i sum_p Y[i, p] psi_p(xi) u_i; ``xi`` may be batched (..., N_z)."""
    amp = state.basis.evaluate(xi) @ state.coeffs.T
    return state.mean + np.einsum("...i,ixy->...xy", amp, state.eigenfields)


def moments(state: DbfeState) -> tuple[np.ndarray, np.ndarray]:
    gamma = cov_Y(state)
    var = np.einsum("ij,ixy,jxy->xy", gamma, state.eigenfields, state.eigenfields)
    return state.mean.copy(), np.maximum(var, 0.0)


@dataclass(frozen=True)
class PointEmulator:
    """The expansion restricted to a set of grid nodes, for cheap likelihoods."""

    mean: np.ndarray  # (M,)
    modes: np.ndarray  # (M, N)
    coeffs: np.ndarray  # (N, P)
    basis: GpcBasis

    @classmethod
    def from_state(cls, state: DbfeState, nodes) -> "PointEmulator":
        idx = tuple(np.asarray(nodes).T)
        return cls(state.mean[idx].copy(), state.eigenfields[:, idx[0], idx[1]].T.copy(), state.coeffs.copy(),
                   state.basis)

    def __call__(self, xi) -> np.ndarray:
        return self.mean + self.modes @ (self.coeffs @ self.basis.evaluate(xi))


def rotate(state: DbfeState, Q: np.ndarray) -> DbfeState:
    """Rotate the eigenfields by the orthogonal matrix Q and compensate the coefficients."""
    U = np.tensordot(Q.T, state.eigenfields, axes=1)
    return replace(state, eigenfields=U, coeffs=Q.T @ state.coeffs)
