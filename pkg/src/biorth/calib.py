"""Bayesian source/diffusivity inversion in the stochastic coordinates xi.

The model error is a zero-mean GP discrepancy with squared-exponential
covariance over the observation points; it is marginalised analytically,
so the likelihood of the data is Gaussian with covariance
Sigma = Sigma_delta(sigma2, lambda) + sigma_e^2 I. The unknowns sampled by
Metropolis-Hastings are xi (source location and diffusivity KL coordinates)
and the discrepancy hyper-parameters, the latter on a log scale.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.stats

from .dbfe import DbfeState, PointEmulator, evaluate_expansion
from .pde import Grid2D, SourceSpec, StepFailure, check_positive, solve_deterministic
from .randfield import BiorthParamField
from .reference import MomentAccumulator

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ObservationSet:
    points: np.ndarray  # (M, 2) requested locations
    nodes: np.ndarray  # (M, 2) grid indices actually used
    values: np.ndarray  # (M,)
    time: float
    noise_sd: float
    offsets: np.ndarray  # (M, 2) node position minus requested point

    def __post_init__(self):
        if len(self.values) < 1:
            raise ValueError("need at least one observation")
        if not self.noise_sd > 0:
            raise ValueError("observation noise sd must be positive")
        if len(self.points) != len(self.values):
            raise ValueError("points and values differ in length")

    @property
    def size(self) -> int:
        return len(self.values)

    def node_points(self, grid: Grid2D) -> np.ndarray:
        return np.column_stack([grid.x[self.nodes[:, 0]], grid.y[self.nodes[:, 1]]])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "i", "j", "value", "time", "noise_sd"])
            for p, n, v in zip(self.points, self.nodes, self.values):
                w.writerow([repr(float(p[0])), repr(float(p[1])), int(n[0]), int(n[1]), repr(float(v)),
                            repr(self.time), repr(self.noise_sd)])

    @classmethod
    def from_csv(cls, path, grid: Grid2D) -> "ObservationSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no observations")
        pts = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        vals = np.array([float(r["value"]) for r in rows])
        nodes, offsets = snap_to_grid(pts, grid)
        return cls(pts, nodes, vals, float(rows[0]["time"]), float(rows[0]["noise_sd"]), offsets)


@dataclass(frozen=True)
class DiscrepancyHyper:
    sigma2_delta: float
    lambda_delta: tuple[float, ...] = (3.0, 3.0)

    def valid(self) -> bool:
        return self.sigma2_delta > 0 and all(l > 0 for l in self.lambda_delta)

    def log_vector(self) -> np.ndarray:
        return np.log(np.array((self.sigma2_delta,) + tuple(self.lambda_delta)))

    @classmethod
    def from_log(cls, v) -> "DiscrepancyHyper":
        e = np.exp(np.asarray(v, dtype=float))
        return cls(float(e[0]), tuple(float(x) for x in e[1:]))


@dataclass(frozen=True)
class PriorConfig:
    alpha_sigma: float = 6.0
    beta_sigma: float = 2.0
    alpha_lambda: float = 6.0
    beta_lambda: float = 2.0  # rate


@dataclass(frozen=True)
class McmcConfig:
    n_kept: int = 10000
    burn_in: int = 1000
    xi_scale: float = 0.1
    hyper_scale: float = 0.2
    target_acceptance: float = 0.35
    adapt_covariance: bool = True
    init_screen: int = 200  # prior draws screened for the starting point; 0 starts at xi = 0
    init_starts: int = 4  # best screened draws refined by a short simplex search
    init_maxfev: int = 300


def snap_to_grid(points, grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    nodes = np.array([grid.nearest_node(p) for p in np.asarray(points, dtype=float)], dtype=np.int64).reshape(-1, 2)
    snapped = np.column_stack([grid.x[nodes[:, 0]], grid.y[nodes[:, 1]]])
    return nodes, snapped - np.asarray(points, dtype=float)


def lattice_points(M: int, extent: float = 0.8) -> np.ndarray:
    """Uniform k x k lattice on [-extent, extent]^2; M must be a perfect square."""
    k = math.isqrt(M)
    if k * k != M:
        raise ValueError(f"{M} observations cannot form a square lattice")
    if not 0 < extent < 1:
        raise ValueError("lattice must lie strictly inside the domain")
    line = np.linspace(-extent, extent, k) if k > 1 else np.zeros(1)
    X, Y = np.meshgrid(line, line, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def make_observations(grid: Grid2D, nu_true: np.ndarray, source: SourceSpec, true_location, t_obs: float,
                      dt: float, M: int = 25, noise_fraction: float = 0.01, rng: np.random.Generator | None = None,
                      extent: float = 0.8) -> tuple[ObservationSet, np.ndarray]:
    """Synthetic data from the deterministic solver; returns (observations, truth field at t_obs)."""
    pts = lattice_points(M, extent)
    nodes, offsets = snap_to_grid(pts, grid)
    if np.any(np.abs(offsets) > 1e-12):
        log.info("observation points snapped to nodes, max offset %.3g", float(np.abs(offsets).max()))
    truth = solve_deterministic(nu_true, source, np.asarray(true_location, dtype=float), grid, t_obs, dt)[t_obs]
    clean = truth[nodes[:, 0], nodes[:, 1]]
    scale = float(np.max(np.abs(clean)))
    sd = noise_fraction * scale
    values = clean.copy()
    if noise_fraction > 0:
        if rng is None:
            raise ValueError("noisy observations need a random generator")
        values = clean + sd * rng.standard_normal(len(clean))
    else:
        # exact data; keep a negligible noise level so Sigma stays well defined
        sd = 1e-12 * max(scale, 1.0)
    return ObservationSet(pts, nodes, values, t_obs, sd, offsets), truth


# ---------------------------------------------------------------------------
# densities


def discrepancy_cov(points: np.ndarray, hyper: DiscrepancyHyper) -> np.ndarray:
    lam = np.asarray(hyper.lambda_delta, dtype=float)
    d = points[:, None, :] - points[None, :, :]
    return hyper.sigma2_delta * np.exp(-np.sum(lam * d * d, axis=-1))


def gaussian_loglik(eta: np.ndarray, cov: np.ndarray) -> float:
    """-1/2 log|Sigma| - 1/2 eta^T Sigma^-1 eta - M/2 log 2 pi; -inf if Sigma is not PD."""
    try:
        c, low = scipy.linalg.cho_factor(cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return -math.inf
    if not np.all(np.isfinite(c)):
        return -math.inf
    return _loglik_from_factor(eta, c)


def _loglik_from_factor(eta, c) -> float:
    r = scipy.linalg.solve_triangular(c, eta, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return float(-0.5 * logdet - 0.5 * r @ r - 0.5 * len(eta) * LOG_2PI)


def log_likelihood(obs: ObservationSet, state: DbfeState, xi, hyper: DiscrepancyHyper, grid: Grid2D) -> float:
    if not hyper.valid():
        return -math.inf
    pred = PointEmulator.from_state(state, obs.nodes)(np.asarray(xi, dtype=float))
    pts = obs.node_points(grid)
    cov = discrepancy_cov(pts, hyper) + obs.noise_sd**2 * np.eye(obs.size)
    return gaussian_loglik(obs.values - pred, cov)


def log_invgamma(x: float, alpha: float, beta: float) -> float:
    if not x > 0:
        return -math.inf
    return alpha * math.log(beta) - math.lgamma(alpha) - (alpha + 1) * math.log(x) - beta / x


def log_gamma(x: float, alpha: float, rate: float) -> float:
    if not x > 0:
        return -math.inf
    return alpha * math.log(rate) - math.lgamma(alpha) + (alpha - 1) * math.log(x) - rate * x


def log_prior(xi, hyper: DiscrepancyHyper, prior: PriorConfig = PriorConfig()) -> float:
    """Unnormalised standard-normal xi term plus normalised IG / Gamma hyper densities."""
    if not hyper.valid():
        return -math.inf
    xi = np.asarray(xi, dtype=float)
    lp = -0.5 * float(xi @ xi)
    lp += log_invgamma(hyper.sigma2_delta, prior.alpha_sigma, prior.beta_sigma)
    for lam in hyper.lambda_delta:
        lp += log_gamma(lam, prior.alpha_lambda, prior.beta_lambda)
    return lp


class MarginalLikelihood:
    """log f(y | xi, hyper) for a prediction function xi -> values at the observation nodes.

    The Cholesky factor is cached per hyper-parameter set and the prediction
    per xi, so a block update that moves only one of them pays for that one.
    """

    def __init__(self, obs: ObservationSet, predict: Callable[[np.ndarray], np.ndarray], grid: Grid2D):
        self.obs = obs
        self.predict = predict
        self.points = obs.node_points(grid)
        self._factor_key = None
        self._factor = None
        self._pred_key = None
        self._pred = None

    def factor(self, hyper: DiscrepancyHyper):
        key = (hyper.sigma2_delta,) + tuple(hyper.lambda_delta)
        if key != self._factor_key:
            cov = discrepancy_cov(self.points, hyper) + self.obs.noise_sd**2 * np.eye(self.obs.size)
            try:
                c, _ = scipy.linalg.cho_factor(cov, lower=True, check_finite=False)
                if not np.all(np.isfinite(c)):
                    c = None
            except np.linalg.LinAlgError:
                c = None
            self._factor_key, self._factor = key, c
        return self._factor

    def prediction(self, xi: np.ndarray):
        key = xi.tobytes()
        if key != self._pred_key:
            self._pred_key, self._pred = key, self.predict(xi)
        return self._pred

    def __call__(self, xi, hyper: DiscrepancyHyper) -> float:
        if not hyper.valid():
            return -math.inf
        c = self.factor(hyper)
        if c is None:
            return -math.inf
        pred = self.prediction(np.asarray(xi, dtype=float))
        if pred is None:
            return -math.inf
        return _loglik_from_factor(self.obs.values - pred, c)


# ---------------------------------------------------------------------------
# sampler


@dataclass
class Chain:
    xi: np.ndarray  # (S, N_z)
    sigma2: np.ndarray  # (S,)
    lam: np.ndarray  # (S, d)
    log_post: np.ndarray  # (S,)
    log_lik: np.ndarray
    accepted: np.ndarray  # (S,) bool, any block moved
    acceptance: dict[str, float]
    scales: dict[str, float]
    warnings: list[str] = field(default_factory=list)
    wall_seconds: float = 0.0
    likelihood_calls: int = 0

    @property
    def size(self) -> int:
        return len(self.log_post)

    def hyper(self, k: int) -> DiscrepancyHyper:
        return DiscrepancyHyper(float(self.sigma2[k]), tuple(float(v) for v in self.lam[k]))

    def to_csv(self, path) -> None:
        nz = self.xi.shape[1]
        cols = (["sample_index"] + [f"xi_{i + 1}" for i in range(nz)] + ["sigma2_delta"]
                + [f"lambda_{i + 1}" for i in range(self.lam.shape[1])] + ["log_post", "accepted"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for k in range(self.size):
                w.writerow([k] + [repr(float(v)) for v in self.xi[k]] + [repr(float(self.sigma2[k]))]
                           + [repr(float(v)) for v in self.lam[k]] + [repr(float(self.log_post[k])),
                                                                       int(self.accepted[k])])


def _adapted_factor(history: np.ndarray) -> np.ndarray | None:
    C = np.atleast_2d(np.cov(history, rowvar=False))
    C = C + 1e-10 * np.eye(len(C)) + 1e-6 * np.diag(np.diag(C))
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return None


def mh_sample(loglik: Callable[[np.ndarray, DiscrepancyHyper], float], n_xi: int, prior: PriorConfig,
              mcmc: McmcConfig, rng: np.random.Generator, xi0=None, hyper0: DiscrepancyHyper | None = None,
              n_lambda: int = 2) -> Chain:
    """Block random-walk Metropolis-Hastings over (xi, log sigma2, log lambda).

    Each iteration proposes a Gaussian move of the xi block, then of the
    log-hyper block. During burn-in the block scales follow a Robbins-Monro
    recursion towards the target acceptance and, optionally, the proposal
    shape is re-estimated from the burn-in history; both are frozen for the
    kept samples.
    """
    t0 = time.perf_counter()
    if hyper0 is None:
        hyper0 = DiscrepancyHyper(prior.beta_sigma / (prior.alpha_sigma + 1),
                                  ((prior.alpha_lambda - 1) / prior.beta_lambda,) * n_lambda)
    calls = 0
    if xi0 is None:
        xi = np.zeros(n_xi)
        if mcmc.init_screen > 0:
            # start from the best of a batch of prior draws; the posterior can be
            # sharply multimodal and a walk from the origin may settle in a minor mode
            cands = np.vstack([xi, rng.standard_normal((mcmc.init_screen, n_xi))])
            scores = np.array([loglik(c, hyper0) + log_prior(c, hyper0, prior) for c in cands])
            calls += len(cands)
            best = xi
            best_score = -math.inf
            for k in np.argsort(-scores, kind="stable")[: max(mcmc.init_starts, 1)]:
                if not math.isfinite(scores[k]):
                    continue
                start, score = cands[k], scores[k]
                if mcmc.init_maxfev > 0:
                    res = scipy.optimize.minimize(
                        lambda v: -(loglik(v, hyper0) + log_prior(v, hyper0, prior)), start, method="Nelder-Mead",
                        options={"maxfev": mcmc.init_maxfev, "xatol": 1e-4, "fatol": 1e-6})
                    calls += res.nfev
                    if math.isfinite(res.fun) and -res.fun > score:
                        start, score = res.x, -res.fun
                if score > best_score:
                    best, best_score = np.array(start, dtype=float), score
            xi = best
    else:
        xi = np.array(xi0, dtype=float)
    phi = hyper0.log_vector()
    hyper = hyper0
    nh = len(phi)

    def jac(p):
        return float(np.sum(p))

    ll = loglik(xi, hyper)
    lp = log_prior(xi, hyper, prior)
    if not math.isfinite(ll + lp):
        raise ValueError("initial state has zero posterior density")
    calls += 1

    blocks = {"xi": n_xi, "hyper": nh}
    L = {"xi": mcmc.xi_scale * np.eye(n_xi), "hyper": mcmc.hyper_scale * np.eye(nh)}
    log_s = {b: 0.0 for b in blocks}
    total = mcmc.burn_in + mcmc.n_kept
    S = mcmc.n_kept
    out_xi = np.empty((S, n_xi))
    out_phi = np.empty((S, nh))
    out_lp = np.empty(S)
    out_ll = np.empty(S)
    out_acc = np.zeros(S, dtype=bool)
    kept_acc = {b: 0 for b in blocks}
    burn_hist = {"xi": np.empty((mcmc.burn_in, n_xi)), "hyper": np.empty((mcmc.burn_in, nh))}
    checkpoints = set()
    if mcmc.adapt_covariance and mcmc.burn_in >= 200:
        checkpoints = set(range(mcmc.burn_in // 2, mcmc.burn_in, max(mcmc.burn_in // 10, 1)))

    for it in range(total):
        moved = False
        for b in ("xi", "hyper"):
            if blocks[b] == 0:
                continue
            step = math.exp(log_s[b]) * (L[b] @ rng.standard_normal(blocks[b]))
            if b == "xi":
                xi_new, phi_new, hyper_new = xi + step, phi, hyper
            else:
                xi_new, phi_new = xi, phi + step
                hyper_new = DiscrepancyHyper.from_log(phi_new)
            lp_new = log_prior(xi_new, hyper_new, prior)
            ll_new = loglik(xi_new, hyper_new) if math.isfinite(lp_new) else -math.inf
            calls += 1
            log_u = math.log(rng.random())
            if math.isfinite(ll_new):
                log_ratio = (ll_new + lp_new + jac(phi_new)) - (ll + lp + jac(phi))
            else:
                log_ratio = -math.inf
            accept = log_u < log_ratio
            if accept:
                xi, phi, hyper, ll, lp = xi_new, phi_new, hyper_new, ll_new, lp_new
                moved = True
            if it < mcmc.burn_in:
                a = min(1.0, math.exp(min(log_ratio, 0.0))) if math.isfinite(log_ratio) else 0.0
                log_s[b] += (a - mcmc.target_acceptance) / (it + 1) ** 0.6
            elif accept:
                kept_acc[b] += 1
        if it < mcmc.burn_in:
            burn_hist["xi"][it] = xi
            burn_hist["hyper"][it] = phi
            if it in checkpoints:
                lo = it // 2
                for b in blocks:
                    if blocks[b]:
                        newL = _adapted_factor(burn_hist[b][lo:it + 1])
                        if newL is not None:
                            L[b] = newL * (2.38 / math.sqrt(blocks[b]))
                            log_s[b] = 0.0
        else:
            k = it - mcmc.burn_in
            out_xi[k] = xi
            out_phi[k] = phi
            out_lp[k] = ll + lp
            out_ll[k] = ll
            out_acc[k] = moved

    rates = {b: kept_acc[b] / max(S, 1) for b in blocks if blocks[b]}
    chain = Chain(out_xi, np.exp(out_phi[:, 0]), np.exp(out_phi[:, 1:]), out_lp, out_ll, out_acc, rates,
                  {b: float(math.exp(log_s[b]) * np.sqrt(np.mean(np.diag(L[b] @ L[b].T)))) for b in blocks
                   if blocks[b]})
    for b, r in rates.items():
        if not 0.05 <= r <= 0.8:
            msg = f"{b} block acceptance rate {r:.3f} outside [0.05, 0.8]"
            chain.warnings.append(msg)
            log.warning(msg)
    chain.wall_seconds = time.perf_counter() - t0
    chain.likelihood_calls = calls
    return chain


def dbfe_likelihood(obs: ObservationSet, state: DbfeState, grid: Grid2D) -> MarginalLikelihood:
    return MarginalLikelihood(obs, PointEmulator.from_state(state, obs.nodes), grid)


def direct_likelihood(obs: ObservationSet, kl_mean, kl_values, kl_fields, source: SourceSpec, grid: Grid2D,
                      dt: float) -> MarginalLikelihood:
    """Likelihood whose prediction runs the deterministic solver at every proposed xi."""
    idx = (obs.nodes[:, 0], obs.nodes[:, 1])
    amp_scale = np.sqrt(np.asarray(kl_values, dtype=float))
    loc0 = np.asarray(source.location_mean, dtype=float)

    def predict(xi):
        nu = kl_mean + np.tensordot(amp_scale * xi[2:], kl_fields, axes=1)
        try:
            check_positive(nu, grid)
            u = solve_deterministic(nu, source, loc0 + source.location_std * xi[:2], grid, obs.time, dt,
                                    check=False)[obs.time]
        except (StepFailure, ValueError) as exc:
            log.info("direct solve rejected at xi=%s: %s", np.array2string(xi, precision=3), exc)
            return None
        return u[idx]

    return MarginalLikelihood(obs, predict, grid)


def direct_mcmc(obs: ObservationSet, setup, prior: PriorConfig, mcmc: McmcConfig, rng: np.random.Generator,
                dt: float) -> Chain:
    lik = direct_likelihood(obs, setup.kl.mean, setup.kl.eigenvalues, setup.kl.eigenfields, setup.source,
                            setup.grid, dt)
    return mh_sample(lik, setup.kl.n_modes + 2, prior, mcmc, rng)


# ---------------------------------------------------------------------------
# summaries


def batch_means_se(x: np.ndarray) -> np.ndarray:
    """Monte Carlo standard error of the chain mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    nb = max(int(math.sqrt(n)), 2)
    size = n // nb
    if size < 1:
        return np.full(x.shape[1:], np.nan)
    means = x[: nb * size].reshape((nb, size) + x.shape[1:]).mean(axis=1)
    return np.sqrt(means.var(axis=0, ddof=1) / nb)


@dataclass
class PosteriorSummary:
    scalars: dict
    fields: dict[str, np.ndarray]
    kde_x: np.ndarray
    kde_y: np.ndarray
    kde_density: np.ndarray
    histograms: dict[str, tuple[np.ndarray, np.ndarray]]

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "summary.json").write_text(json.dumps(self.scalars, indent=2, sort_keys=True))
        for name, f in sorted(self.fields.items()):
            np.savetxt(d / f"{name}.csv", f, delimiter=",", fmt="%.17g")
        np.savetxt(d / "source_kde.csv", self.kde_density, delimiter=",", fmt="%.17g")
        np.savetxt(d / "source_kde_axes.csv", np.column_stack([self.kde_x, self.kde_y]), delimiter=",", fmt="%.17g")
        for name, (counts, edges) in sorted(self.histograms.items()):
            with open(d / f"hist_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["left", "right", "count"])
                for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                    w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def source_samples(chain: Chain, source: SourceSpec) -> np.ndarray:
    return np.asarray(source.location_mean) + source.location_std * chain.xi[:, :2]


def hpd_contains(samples: np.ndarray, point, level: float = 0.9) -> tuple[bool, float]:
    """Whether ``point`` lies in the KDE highest-density region of the given mass."""
    kde = scipy.stats.gaussian_kde(samples.T, bw_method="scott")
    dens = kde(samples.T)
    p = float(kde(np.asarray(point, dtype=float)[:, None])[0])
    mass_above = float(np.mean(dens > p))
    return mass_above < level, mass_above


def posterior_summaries(chain: Chain, state: DbfeState, param: BiorthParamField, grid: Grid2D,
                        source: SourceSpec, truth_nu=None, truth_u=None, true_location=None,
                        kde_points: int = 81, bins: int = 30, batch: int = 500) -> PosteriorSummary:
    if chain.size == 0:
        raise ValueError("empty chain")
    z = source_samples(chain, source)
    kx = np.linspace(-1, 1, kde_points)
    ky = np.linspace(-1, 1, kde_points)
    KX, KY = np.meshgrid(kx, ky, indexing="ij")
    if np.all(np.ptp(z, axis=0) > 0):
        kde = scipy.stats.gaussian_kde(z.T, bw_method="scott")
        density = kde(np.vstack([KX.ravel(), KY.ravel()])).reshape(KX.shape)
    else:
        density = np.zeros(KX.shape)

    acc = MomentAccumulator()
    for start in range(0, chain.size, batch):
        acc.add_batch(param.evaluate(chain.xi[start:start + batch]))
    nu_mean = np.asarray(acc.mean)
    nu_var = np.asarray(acc.m2 / chain.size) if chain.size > 1 else np.zeros(grid.shape)

    xi_mean = chain.xi.mean(axis=0)
    u_mean = evaluate_expansion(state, xi_mean)
    fields = {"nu_posterior_mean": nu_mean, "nu_posterior_variance": nu_var, "u_at_mean_xi": u_mean}
    scalars = {
        "samples": chain.size,
        "acceptance": chain.acceptance,
        "warnings": chain.warnings,
        "xi_mean": xi_mean.tolist(),
        "xi_mcse": batch_means_se(chain.xi).tolist(),
        "source_mean": z.mean(axis=0).tolist(),
        "source_sd": z.std(axis=0, ddof=1).tolist() if chain.size > 1 else [0.0, 0.0],
        "sigma2_delta_mean": float(chain.sigma2.mean()),
        "lambda_delta_mean": chain.lam.mean(axis=0).tolist(),
    }
    if truth_nu is not None:
        fields["nu_abs_error"] = np.abs(nu_mean - truth_nu)
        scalars["l1_nu_mean"] = float(grid.integrate(fields["nu_abs_error"]))
    if truth_u is not None:
        fields["u_abs_error"] = np.abs(u_mean - truth_u)
        scalars["l1_u_mean"] = float(grid.integrate(fields["u_abs_error"]))
    if true_location is not None:
        scalars["source_error"] = float(np.linalg.norm(z.mean(axis=0) - np.asarray(true_location)))
        if chain.size > 2 and np.all(np.ptp(z, axis=0) > 0):
            inside, mass = hpd_contains(z, true_location, 0.9)
            scalars["truth_in_90_hpd"] = bool(inside)
            scalars["hpd_mass_above_truth"] = mass
    hists = {"sigma2_delta": np.histogram(chain.sigma2, bins=bins)}
    for i in range(chain.lam.shape[1]):
        hists[f"lambda_{i + 1}"] = np.histogram(chain.lam[:, i], bins=bins)
    return PosteriorSummary(scalars, fields, kx, ky, density, hists)
