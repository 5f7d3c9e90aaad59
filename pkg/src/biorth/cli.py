"""Command-line experiment runner.

    biorth propagate  [--method dbfe|gpc|mc]
    biorth bench
    biorth calibrate  [--direct] [--observations CSV]
    biorth validate-config

Every subcommand accepts --config, --seed, --out and repeatable --override KEY=VALUE.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calib import ObservationSet, dbfe_likelihood, direct_mcmc, make_observations, mh_sample, posterior_summaries
from .config import ConfigError, ExperimentConfig, load_config
from .dbfe import moments, propagate
from .pde import NonPositiveDiffusivity, StepFailure
from .problem import build_forward, prior_mean_diffusivity, true_diffusivity
from .reference import BenchConfig, gpc_problem, gpc_propagate, mc_propagate, run_benchmark, write_benchmark_csv

log = logging.getLogger("biorth")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

# fixed identifiers of the named random sub-streams
STREAMS = {"observation_noise": 1, "mc_sampling": 2, "mcmc": 3, "direct_mcmc": 4}


def substream(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, STREAMS[name]])


def stream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).generate_state(1, dtype=np.uint64)[0])


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(substream(seed, name)))


def _write_field(path: Path, a: np.ndarray) -> None:
    np.savetxt(path, a, delimiter=",", fmt="%.17g")


def _tag(t: float) -> str:
    return f"{t:.6f}".rstrip("0").rstrip(".").replace(".", "p")


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, wall: float, extra: dict | None = None) -> None:
    manifest = {
        "version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "streams": {name: {"entropy": [cfg.seed, sid]} for name, sid in STREAMS.items()},
        "derived": cfg.derived(),
        "wall_seconds": wall,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_propagate(cfg: ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    setup = build_forward(cfg.forward())
    times = sorted(set(cfg.time.record_times) | {cfg.time.t_end})
    fields = out / "fields"
    fields.mkdir(parents=True, exist_ok=True)
    extra: dict = {"method": cfg.method}
    if cfg.method == "dbfe":
        problem = setup.dbfe_problem(cfg.dbfe_options())
        states = propagate(problem, setup.dbfe_initial(problem), cfg.time.t_end, cfg.time.dt, times)
        results = {}
        for t in times:
            results[t] = moments(states[t])
            states[t].save(out / "checkpoints" / f"t{_tag(t)}")
    elif cfg.method == "gpc":
        states = gpc_propagate(gpc_problem(setup), cfg.time.t_end, cfg.time.dt, times)
        results = {t: (states[t].mean, states[t].variance) for t in times}
    else:
        mc = mc_propagate(setup, cfg.mc.samples, cfg.time.t_end, cfg.time.dt, stream_seed(cfg.seed, "mc_sampling"),
                          times, nu_min=cfg.mc.nu_min, batch=cfg.mc.batch)
        results = {}
        for t in times:
            r = mc[t]
            results[t] = (r.mean, r.variance)
            _write_field(fields / f"mean_se_t{_tag(t)}.csv", r.mean_se)
            _write_field(fields / f"variance_se_t{_tag(t)}.csv", r.variance_se)
        last = mc[times[-1]]
        extra.update(mc_samples=last.n_samples, mc_failed=last.n_failed, mc_clamped=last.n_clamped)
    for t in times:
        mean, var = results[t]
        _write_field(fields / f"mean_t{_tag(t)}.csv", mean)
        _write_field(fields / f"variance_t{_tag(t)}.csv", var)
    extra["record_times"] = times
    write_manifest(out, "propagate", cfg, time.perf_counter() - t0, extra)
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    b = cfg.bench
    bc = BenchConfig(forward=cfg.forward(), dt=cfg.time.dt, t_compare=b.t_compare,
                     runs=tuple((str(m), int(n), int(p)) for m, n, p in b.runs), mc_samples=b.mc_samples,
                     mc_modes=b.mc_modes, seed=stream_seed(cfg.seed, "mc_sampling"), repeats=b.repeats,
                     dbfe_options=cfg.dbfe_options())
    records = run_benchmark(bc)
    out.mkdir(parents=True, exist_ok=True)
    write_benchmark_csv(records, out / "benchmark.csv")
    failed = [f"{r.method} N={r.N} p={r.p}: {r.error}" for r in records if r.error]
    write_manifest(out, "bench", cfg, time.perf_counter() - t0, {"failed_runs": failed})
    for msg in failed:
        print(f"benchmark run failed: {msg}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig, out: Path, direct: bool = False, obs_file: str | None = None) -> int:
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    setup = build_forward(cfg.forward())
    grid = setup.grid
    d = cfg.diffusivity
    truth_fn = true_diffusivity if d.truth == "cubic" else prior_mean_diffusivity
    nu_true = truth_fn(grid, d.nu0, d.scale)
    t_obs, dt = cfg.time.t_obs, cfg.time.dt
    true_loc = tuple(cfg.source.true_location)
    obs_file = obs_file or cfg.observations.file
    obs, truth_u = make_observations(grid, nu_true, setup.source, true_loc, t_obs, dt, cfg.observations.M,
                                     cfg.observations.noise_fraction, stream_rng(cfg.seed, "observation_noise"),
                                     cfg.observations.extent)
    if obs_file:
        obs = ObservationSet.from_csv(obs_file, grid)
        t_obs = obs.time
    obs.to_csv(out / "observations.csv")

    problem = setup.dbfe_problem(cfg.dbfe_options())
    state = propagate(problem, setup.dbfe_initial(problem), t_obs, dt)[t_obs]
    state.save(out / "checkpoint")
    lik = dbfe_likelihood(obs, state, grid)
    chain = mh_sample(lik, setup.config.dimension, cfg.prior_config(), cfg.mcmc_config(), stream_rng(cfg.seed, "mcmc"))
    chain.to_csv(out / "chain.csv")
    summary = posterior_summaries(chain, state, setup.param, grid, setup.source, nu_true, truth_u, true_loc)
    summary.scalars.update(acceptance=chain.acceptance, chain_warnings=chain.warnings,
                           likelihood_seconds=chain.wall_seconds / max(chain.likelihood_calls, 1))
    summary.write(out / "summary")
    extra = {"n_observations": obs.size, "t_obs": t_obs, "acceptance": chain.acceptance,
             "chain_warnings": chain.warnings, "mcmc": {"n_kept": cfg.mcmc.n_kept, "burn_in": cfg.mcmc.burn_in},
             "priors": {"sigma2_delta": ["inverse_gamma", cfg.priors.alpha_sigma, cfg.priors.beta_sigma],
                        "lambda_delta": ["gamma", cfg.priors.alpha_lambda, cfg.priors.beta_lambda]}}
    if direct or cfg.mcmc.direct:
        dchain = direct_mcmc(obs, setup, cfg.prior_config(), cfg.mcmc_config(), stream_rng(cfg.seed, "direct_mcmc"),
                             dt)
        dchain.to_csv(out / "direct_chain.csv")
        extra["direct_acceptance"] = dchain.acceptance
        extra["direct_chain_warnings"] = dchain.warnings
    for w in chain.warnings:
        print(f"warning: {w}", file=sys.stderr)
    write_manifest(out, "calibrate", cfg, time.perf_counter() - t0, extra)
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig) -> int:
    print(json.dumps({"config": cfg.to_dict(), "derived": cfg.derived()}, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file or a run manifest")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. grid.nx=41 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="biorth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"biorth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("propagate", parents=[common], help="propagate uncertainty to the record times")
    p.add_argument("--method", choices=["dbfe", "gpc", "mc"])
    sub.add_parser("bench", parents=[common], help="accuracy/cost benchmark against a Monte Carlo baseline")
    c = sub.add_parser("calibrate", parents=[common], help="Bayesian source inversion")
    c.add_argument("--direct", action="store_true", help="also run MCMC with the full solver as likelihood")
    c.add_argument("--observations", help="observation CSV to use instead of synthetic data")
    sub.add_parser("validate-config", parents=[common], help="resolve and print the configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output={json.dumps(args.out)}")
    if getattr(args, "method", None):
        overrides.append(f"method={args.method}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate-config":
        return cmd_validate(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "propagate":
            return cmd_propagate(cfg, out)
        if args.command == "bench":
            return cmd_bench(cfg, out)
        return cmd_calibrate(cfg, out, args.direct, args.observations)
    except (StepFailure, NonPositiveDiffusivity, FloatingPointError, np.linalg.LinAlgError) as exc:
        stamp = getattr(exc, "t", None)
        where = f" at t={stamp:.6g}" if stamp is not None else ""
        print(f"numerical failure{where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
