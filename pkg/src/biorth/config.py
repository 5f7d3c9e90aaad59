"""Layered experiment configuration: defaults <- YAML/JSON file <- KEY=VALUE overrides.

Unknown keys and ill-typed values are rejected; when the problem comes from a
file the message carries the file name and line number.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .calib import McmcConfig, PriorConfig
from .dbfe import DbfeOptions
from .pde import Grid2D, SourceSpec
from .problem import ForwardConfig


class ConfigError(ValueError):
    pass


@dataclass
class GridSection:
    """Square node-centred grid. ``h`` may be left null, in which case it is
    derived from ``nx`` so the grid spans [origin, origin + 2] in both axes."""

    nx: int = 101
    ny: int = 101
    h: typing.Optional[float] = None
    origin: list[float] = field(default_factory=lambda: [-1.0, -1.0])

    @property
    def spacing(self) -> float:
        return 2.0 / (self.nx - 1) if self.h is None else self.h


@dataclass
class TimeSection:
    dt: float = 1e-4
    t_end: float = 0.05
    record_times: list[float] = field(default_factory=lambda: [0.05])
    t_obs: float = 0.02


@dataclass
class SourceSection:
    location_mean: list[float] = field(default_factory=lambda: [0.0, 0.0])
    location_std: float = 0.3
    strength: float = 1.0
    width: float = 0.1
    active_interval: list[float] = field(default_factory=lambda: [0.0, 0.01])
    true_location: list[float] = field(default_factory=lambda: [0.2, -0.2])


@dataclass
class DiffusivitySection:
    nu0: float = 0.0
    scale: float = 0.05
    kernel_variance: float = 0.3
    lengthscales: list[float] = field(default_factory=lambda: [1.5, 1.5])
    truth: str = "cubic"  # "cubic" adds x^3 + y^3 inside the bracket, "prior_mean" leaves it out
    kl_method: str = "auto"


@dataclass
class ExpansionSection:
    N: int = 5
    p: int = 2
    quad_level: int = 20


@dataclass
class DbfeSection:
    inverse: str = "pinv"
    rank_tol: float = 1e-10
    tikhonov_eps: float = 1e-10
    reorthonormalize: bool = True
    activate_modes: bool = True
    max_rotation: float = 0.25


@dataclass
class McSection:
    samples: int = 10000
    nu_min: float = 1e-3
    batch: int = 250


@dataclass
class BenchSection:
    runs: list[list] = field(default_factory=lambda: [["dbfe", 1, 2], ["dbfe", 2, 2], ["dbfe", 4, 2], ["dbfe", 5, 2],
                                                     ["gpc", 4, 2], ["dbfe", 4, 3], ["gpc", 4, 3]])
    mc_samples: int = 2000
    mc_modes: int = 12
    repeats: int = 3
    t_compare: float = 0.05


@dataclass
class McmcSection:
    n_kept: int = 10000
    burn_in: int = 1000
    xi_scale: float = 0.1
    hyper_scale: float = 0.2
    target_acceptance: float = 0.35
    adapt_covariance: bool = True
    init_screen: int = 200
    init_starts: int = 4
    init_maxfev: int = 300
    direct: bool = False


@dataclass
class PriorSection:
    alpha_sigma: float = 6.0
    beta_sigma: float = 2.0
    alpha_lambda: float = 6.0
    beta_lambda: float = 2.0


@dataclass
class ObservationSection:
    M: int = 25
    noise_fraction: float = 0.01
    extent: float = 0.8
    file: typing.Optional[str] = None


@dataclass
class ExperimentConfig:
    grid: GridSection = field(default_factory=GridSection)
    time: TimeSection = field(default_factory=TimeSection)
    source: SourceSection = field(default_factory=SourceSection)
    diffusivity: DiffusivitySection = field(default_factory=DiffusivitySection)
    expansion: ExpansionSection = field(default_factory=ExpansionSection)
    dbfe: DbfeSection = field(default_factory=DbfeSection)
    method: str = "dbfe"
    mc: McSection = field(default_factory=McSection)
    bench: BenchSection = field(default_factory=BenchSection)
    mcmc: McmcSection = field(default_factory=McmcSection)
    priors: PriorSection = field(default_factory=PriorSection)
    observations: ObservationSection = field(default_factory=ObservationSection)
    seed: int = 0
    output: str = "out"

    # -- derived objects -------------------------------------------------
    def grid_obj(self) -> Grid2D:
        g = self.grid
        return Grid2D(g.nx, g.ny, g.spacing, g.origin[0], g.origin[1])

    def source_spec(self) -> SourceSpec:
        s = self.source
        return SourceSpec(tuple(s.location_mean), s.location_std, s.strength, s.width, tuple(s.active_interval))

    def forward(self, n_modes: int | None = None, order: int | None = None) -> ForwardConfig:
        d = self.diffusivity
        return ForwardConfig(
            nx=self.grid.nx, nu0=d.nu0, scale=d.scale, kernel_variance=d.kernel_variance,
            lengthscales=tuple(d.lengthscales), n_modes=self.expansion.N if n_modes is None else n_modes,
            order=self.expansion.p if order is None else order, source=self.source_spec(), kl_method=d.kl_method,
            quad_level=self.expansion.quad_level)

    def dbfe_options(self) -> DbfeOptions:
        d = self.dbfe
        return DbfeOptions(d.inverse, d.rank_tol, d.tikhonov_eps, d.reorthonormalize, d.activate_modes,
                           d.max_rotation if d.max_rotation > 0 else None)

    def mcmc_config(self) -> McmcConfig:
        m = self.mcmc
        return McmcConfig(m.n_kept, m.burn_in, m.xi_scale, m.hyper_scale, m.target_acceptance, m.adapt_covariance,
                          m.init_screen, m.init_starts, m.init_maxfev)

    def prior_config(self) -> PriorConfig:
        p = self.priors
        return PriorConfig(p.alpha_sigma, p.beta_sigma, p.alpha_lambda, p.beta_lambda)

    def derived(self) -> dict:
        nz = self.expansion.N + 2
        return {"h": self.grid.spacing, "N_z": nz,
                "P": math.comb(nz + self.expansion.p, self.expansion.p), "version": __version__}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# conversion and validation


def _where(node, source: str | None) -> str:
    if node is None or source is None:
        return source or "<config>"
    return f"{source}:{node.start_mark.line + 1}"


def _convert(value, tp, where: str, key: str):
    origin = typing.get_origin(tp)
    if tp is typing.Any:
        return value
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], where, key)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: '{key}' must be a list, got {type(value).__name__}")
        (inner,) = typing.get_args(tp) or (typing.Any,)
        return [_convert(v, inner, where, key) for v in value]
    if tp is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: '{key}' must be a list, got {type(value).__name__}")
        return list(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: '{key}' must be true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{where}: '{key}' must be an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot, e.g. 1e-4, as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: '{key}' must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: '{key}' must be a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type for '{key}'")


def _apply_mapping(obj, node, source: str | None, prefix: str = "") -> None:
    """Copy a YAML mapping node onto dataclass ``obj``, section by section."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(node, source)}: section '{prefix or 'top level'}' must be a mapping")
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for knode, vnode in node.value:
        key = knode.value
        full = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{_where(knode, source)}: unknown key '{full}'")
        tp = hints[key]
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply_mapping(current, vnode, source, full + ".")
        else:
            value = yaml.safe_load(yaml.serialize(vnode)) if vnode is not None else None
            setattr(obj, key, _convert(value, tp, _where(vnode, source), full))


def _apply_dict(obj, data: dict, source: str, prefix: str = "") -> None:
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        full = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{source}: unknown key '{full}'")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: section '{full}' must be a mapping")
            _apply_dict(current, value, source, full + ".")
        else:
            setattr(obj, key, _convert(value, hints[key], source, full))


def validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(f"invalid configuration: {msg}")

    g, t, s, d, e = cfg.grid, cfg.time, cfg.source, cfg.diffusivity, cfg.expansion
    need(g.nx >= 3 and g.ny >= 3, "grid needs at least 3 nodes per direction")
    need(g.nx == g.ny, "only square grids with equal spacing are supported (nx must equal ny)")
    need(len(g.origin) == 2, "grid.origin is a 2-vector")
    # the diffusivity and source models are posed on [-1, 1]^2
    need(abs(g.spacing * (g.nx - 1) - 2.0) < 1e-9 and g.origin == [-1.0, -1.0],
         "the grid must cover [-1, 1]^2: origin [-1, -1] and h = 2 / (nx - 1)")
    need(t.dt > 0, "time.dt must be positive")
    need(t.t_end >= 0 and t.t_obs > 0, "times must be positive")
    need(all(0 <= r <= t.t_end for r in t.record_times), "record_times must lie in [0, t_end]")
    need(len(s.location_mean) == 2 and len(s.true_location) == 2, "locations are 2-vectors")
    need(len(s.active_interval) == 2 and s.active_interval[0] <= s.active_interval[1], "bad source active_interval")
    need(s.width > 0 and s.location_std >= 0, "source width must be positive, location_std non-negative")
    need(d.scale > 0 and d.kernel_variance >= 0, "diffusivity scale > 0 and kernel_variance >= 0 required")
    need(len(d.lengthscales) == 2 and all(l > 0 for l in d.lengthscales), "two positive kernel lengthscales required")
    need(d.truth in ("cubic", "prior_mean"), "diffusivity.truth must be 'cubic' or 'prior_mean'")
    need(d.kl_method in ("auto", "dense", "kron"), "diffusivity.kl_method must be auto, dense or kron")
    need(e.N >= 1 and e.p >= 0, "expansion needs N >= 1 and p >= 0")
    need(e.quad_level >= e.p + 1, "expansion.quad_level must be at least p + 1")
    need(cfg.method in ("dbfe", "gpc", "mc"), "method must be dbfe, gpc or mc")
    need(cfg.dbfe.inverse in ("pinv", "tikhonov"), "dbfe.inverse must be pinv or tikhonov")
    need(cfg.mc.samples >= 2 and cfg.mc.nu_min > 0 and cfg.mc.batch >= 1, "mc settings out of range")
    need(cfg.bench.mc_samples >= 2 and cfg.bench.repeats >= 1 and cfg.bench.mc_modes >= 1, "bench settings out of range")
    for run in cfg.bench.runs:
        need(isinstance(run, list) and len(run) == 3 and run[0] in ("dbfe", "gpc")
             and all(isinstance(v, int) and not isinstance(v, bool) for v in run[1:]) and run[1] >= 1 and run[2] >= 0,
             f"bench run {run!r} must be [dbfe|gpc, N, p]")
    m = cfg.mcmc
    need(m.n_kept >= 1 and m.burn_in >= 0, "mcmc lengths out of range")
    need(m.xi_scale > 0 and m.hyper_scale > 0 and 0 < m.target_acceptance < 1, "mcmc proposal settings out of range")
    p = cfg.priors
    need(min(p.alpha_sigma, p.beta_sigma, p.alpha_lambda, p.beta_lambda) > 0, "prior parameters must be positive")
    o = cfg.observations
    need(o.M >= 1 and math.isqrt(o.M) ** 2 == o.M, "observations.M must be a perfect square")
    need(o.noise_fraction >= 0 and 0 < o.extent < 1, "observation settings out of range")
    need(cfg.seed >= 0, "seed must be non-negative")


def load_config(path: str | Path | None = None, overrides: typing.Sequence[str] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            root = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if root is not None:
            # a run manifest carries the resolved configuration under "config"
            if isinstance(root, yaml.MappingNode):
                keys = {k.value: v for k, v in root.value}
                if "config" in keys and "version" in keys:
                    root = keys["config"]
            _apply_mapping(cfg, root, str(path))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
        data: dict = {}
        cur = data
        parts = key.split(".")
        for part in parts[:-1]:
            cur = cur.setdefault(part, {})
        cur[parts[-1]] = value
        _apply_dict(cfg, data, f"override {item!r}")
    validate(cfg)
    return cfg


def from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _apply_dict(cfg, data, "<dict>")
    validate(cfg)
    return cfg
