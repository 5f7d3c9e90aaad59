"""Reference propagators (intrusive gPC, Monte Carlo) and the accuracy/cost benchmark."""
from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse

from .basis import GpcBasis
from .dbfe import DbfeOptions, moments, propagate
from .pde import (
    Grid2D,
    StepFailure,
    divergence,
    face_diffusivity,
    gradients,
    rk4_step,
    solve_deterministic,
    step_count,
)
from .problem import ForwardConfig, ForwardSetup, build_forward

log = logging.getLogger(__name__)

NU_MIN = 1e-3


# ---------------------------------------------------------------------------
# intrusive Galerkin


@dataclass
class GpcState:
    t: float
    coeff_fields: np.ndarray  # (P, nx, ny)
    basis: GpcBasis = field(repr=False)

    def __post_init__(self):
        if len(self.coeff_fields) != self.basis.size:
            raise ValueError("one coefficient field per basis term required")

    @property
    def mean(self) -> np.ndarray:
        return self.coeff_fields[0]

    @property
    def variance(self) -> np.ndarray:
        n = self.basis.norms_sq[1:]
        return np.einsum("p,pxy->xy", n, self.coeff_fields[1:] ** 2)


class GpcProblem:
    """du_q/dt = sum_{j,k} <psi_j psi_k psi_q>/<psi_q^2> div(nu_j grad u_k) + S_q."""

    def __init__(self, grid: Grid2D, nu_coeffs: np.ndarray, source_coeffs: np.ndarray, basis: GpcBasis,
                 source_interval=(0.0, 0.01)):
        self.grid = grid
        self.basis = basis
        self.source_coeffs = source_coeffs
        self.source_interval = source_interval
        active = [j for j in range(basis.size) if np.any(nu_coeffs[j] != 0)]
        I, J, K, V = basis.sparse_triples()
        n = basis.norms_sq
        self.terms = []
        for j in active:
            sel = I == j
            C = scipy.sparse.csr_matrix((V[sel] / n[K[sel]], (K[sel], J[sel])), shape=(basis.size, basis.size))
            fx, fy = face_diffusivity(nu_coeffs[j])
            self.terms.append((fx, fy, C))

    def rhs(self, u: np.ndarray, source_on: bool) -> np.ndarray:
        P = len(u)
        gx, gy = gradients(u, self.grid.h)
        fx = np.zeros_like(gx)
        fy = np.zeros_like(gy)
        for nux, nuy, C in self.terms:
            fx += nux * (C @ gx.reshape(P, -1)).reshape(gx.shape)
            fy += nuy * (C @ gy.reshape(P, -1)).reshape(gy.shape)
        out = divergence(fx, fy, self.grid.h)
        if source_on:
            out += self.source_coeffs
        return out


def gpc_problem(setup: ForwardSetup) -> GpcProblem:
    return GpcProblem(setup.grid, setup.param.gpc_fields(), setup.source_coeffs, setup.basis,
                      setup.source.active_interval)


def gpc_propagate(problem: GpcProblem, t_end: float, dt: float, record_times: Sequence[float] = ()) -> dict[float, GpcState]:
    n_end = step_count(t_end, dt, "t_end")
    wanted = {step_count(t, dt, "record time"): t for t in record_times}
    wanted[n_end] = t_end
    on = step_count(problem.source_interval[0], dt)
    off = step_count(problem.source_interval[1], dt)
    u = np.zeros((problem.basis.size,) + problem.grid.shape)
    out = {}
    if 0 in wanted:
        out[wanted[0]] = GpcState(0.0, u.copy(), problem.basis)
    for n in range(n_end):
        source_on = on <= n < off
        u = rk4_step(u, lambda t, v: problem.rhs(v, source_on), n * dt, dt)
        if n + 1 in wanted:
            out[wanted[n + 1]] = GpcState((n + 1) * dt, u.copy(), problem.basis)
    return out


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MomentAccumulator:
    """Streaming central moments up to fourth order, merged batch by batch."""

    count: int = 0
    mean: np.ndarray | float = 0.0
    m2: np.ndarray | float = 0.0
    m3: np.ndarray | float = 0.0
    m4: np.ndarray | float = 0.0

    def add_batch(self, x: np.ndarray) -> None:
        nb = len(x)
        if nb == 0:
            return
        mb = x.mean(axis=0)
        d = x - mb
        d2 = d * d
        m2b = d2.sum(axis=0)
        m3b = (d2 * d).sum(axis=0)
        m4b = (d2 * d2).sum(axis=0)
        na = self.count
        if na == 0:
            self.count, self.mean, self.m2, self.m3, self.m4 = nb, mb, m2b, m3b, m4b
            return
        n = na + nb
        delta = mb - self.mean
        m2a, m3a = self.m2, self.m3
        self.m4 = (self.m4 + m4b + delta**4 * na * nb * (na * na - na * nb + nb * nb) / n**3
                   + 6 * delta**2 * (na * na * m2b + nb * nb * m2a) / n**2 + 4 * delta * (na * m3b - nb * m3a) / n)
        self.m3 = m3a + m3b + delta**3 * na * nb * (na - nb) / n**2 + 3 * delta * (na * m2b - nb * m2a) / n
        self.m2 = m2a + m2b + delta**2 * na * nb / n
        self.mean = self.mean + delta * nb / n
        self.count = n

    @property
    def variance(self):
        return self.m2 / (self.count - 1)

    @property
    def mean_se(self):
        return np.sqrt(self.variance / self.count)

    @property
    def variance_se(self):
        n = self.count
        mu4 = self.m4 / n
        s2 = self.variance
        return np.sqrt(np.maximum(mu4 - s2 * s2 * (n - 3) / (n - 1), 0.0) / n)


@dataclass
class McResult:
    t: float
    mean: np.ndarray
    variance: np.ndarray
    mean_se: np.ndarray
    variance_se: np.ndarray
    n_samples: int
    n_failed: int
    n_clamped: int
    wall_seconds: float


def sample_streams(seed: int, start: int, count: int, dim: int) -> np.ndarray:
    """Standard normal xi for samples start..start+count-1; sample i has its own stream."""
    out = np.empty((count, dim))
    for k in range(count):
        ss = np.random.SeedSequence(seed, spawn_key=(start + k,))
        out[k] = np.random.Generator(np.random.PCG64(ss)).standard_normal(dim)
    return out


def mc_propagate(setup: ForwardSetup, n_samples: int, t_end: float, dt: float, seed: int,
                 record_times: Sequence[float] = (), nu_min: float = NU_MIN, batch: int = 250) -> dict[float, McResult]:
    """Moments of the solution over prior draws of source location and diffusivity."""
    if n_samples < 2:
        raise ValueError("need at least two Monte Carlo samples")
    t0 = time.perf_counter()
    times = sorted(set(record_times) | {t_end})
    acc = {t: MomentAccumulator() for t in times}
    failed = clamped = 0
    dim = setup.kl.n_modes + 2
    for start in range(0, n_samples, batch):
        count = min(batch, n_samples - start)
        xi = sample_streams(seed, start, count, dim)
        nu = setup.diffusivity_samples(xi)
        low = np.any(nu < nu_min, axis=(1, 2))
        clamped += int(low.sum())
        nu = np.maximum(nu, nu_min)
        z = setup.source_locations(xi)
        try:
            snaps = solve_deterministic(nu, setup.source, z, setup.grid, t_end, dt, times)
        except StepFailure:
            # isolate the failing realisations
            parts = []
            for k in range(count):
                try:
                    parts.append(solve_deterministic(nu[k], setup.source, z[k], setup.grid, t_end, dt, times))
                except StepFailure as exc:
                    failed += 1
                    log.warning("sample %d failed: %s", start + k, exc)
            snaps = {t: np.array([p[t] for p in parts]).reshape((-1,) + setup.grid.shape) for t in times}
        for t in times:
            acc[t].add_batch(snaps[t])
    wall = time.perf_counter() - t0
    good = n_samples - failed
    if good < 2:
        raise RuntimeError(f"only {good} Monte Carlo samples integrated successfully")
    return {
        t: McResult(t, a.mean, a.variance, a.mean_se, a.variance_se, good, failed, clamped, wall)
        for t, a in acc.items()
    }


# ---------------------------------------------------------------------------
# metrics and benchmark


def l1_error(a, b, grid: Grid2D) -> float:
    """Grid-weighted L1 norm of a - b."""
    a = getattr(a, "values", a)
    b = getattr(b, "values", b)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != grid.shape or b.shape != grid.shape:
        raise ValueError(f"fields {a.shape} and {b.shape} are not on the {grid.shape} grid")
    return float(grid.integrate(np.abs(a - b)))


CSV_COLUMNS = ["method", "N", "p", "P_terms", "grid_nx", "dt", "t_compare", "wall_seconds", "l1_mean",
               "l1_variance", "mc_baseline_samples", "seed"]


@dataclass
class BenchRecord:
    method: str
    N: int
    p: int
    P_terms: int
    grid_nx: int
    dt: float
    t_compare: float
    wall_seconds: float
    l1_mean: float
    l1_variance: float
    mc_baseline_samples: int
    seed: int
    error: str | None = None
    timings: list[float] = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass(frozen=True)
class BenchConfig:
    forward: ForwardConfig = ForwardConfig(nx=41)
    dt: float = 5e-4
    t_compare: float = 0.05
    runs: tuple[tuple[str, int, int], ...] = (("dbfe", 1, 2), ("dbfe", 2, 2), ("dbfe", 4, 2), ("dbfe", 5, 2),
                                               ("gpc", 4, 2))
    mc_samples: int = 2000
    mc_modes: int = 12
    seed: int = 0
    repeats: int = 3
    dbfe_options: DbfeOptions = DbfeOptions()


def _timed(fn, repeats: int):
    times = []
    result = None
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return result, times


def run_single(setup: ForwardSetup, method: str, dt: float, t_end: float, repeats: int = 1,
               options: DbfeOptions = DbfeOptions()):
    """Mean and variance at t_end by the named intrusive method, and the wall times."""
    if method == "dbfe":
        def go():
            problem = setup.dbfe_problem(options)
            return moments(propagate(problem, setup.dbfe_initial(problem), t_end, dt)[t_end])
    elif method == "gpc":
        def go():
            s = gpc_propagate(gpc_problem(setup), t_end, dt)[t_end]
            return s.mean, s.variance
    else:
        raise ValueError(f"unknown method {method!r}")
    return _timed(go, repeats)


def mc_baseline(config: BenchConfig) -> McResult:
    base = build_forward(replace(config.forward, n_modes=config.mc_modes, order=1))
    return mc_propagate(base, config.mc_samples, config.t_compare, config.dt, config.seed)[config.t_compare]


def run_benchmark(config: BenchConfig, baseline: McResult | None = None) -> list[BenchRecord]:
    if baseline is None:
        baseline = mc_baseline(config)
    records = []
    for method, N, p in config.runs:
        rec = BenchRecord(method, N, p, math.comb(N + 2 + p, p), config.forward.nx, config.dt, config.t_compare,
                          float("nan"), float("nan"), float("nan"), config.mc_samples, config.seed)
        try:
            setup = build_forward(replace(config.forward, n_modes=N, order=p))
            (mean, var), times = run_single(setup, method, config.dt, config.t_compare, config.repeats,
                                            config.dbfe_options)
            rec.timings = times
            rec.wall_seconds = statistics.median(times)
            rec.l1_mean = l1_error(mean, baseline.mean, setup.grid)
            rec.l1_variance = l1_error(var, baseline.variance, setup.grid)
        except (StepFailure, FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
            log.error("benchmark run %s N=%d p=%d failed: %s", method, N, p, exc)
        records.append(rec)
    return records


def write_benchmark_csv(records: Sequence[BenchRecord], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})
