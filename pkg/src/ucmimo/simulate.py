"""Monte Carlo campaigns: configuration, per-drop pipeline and result files.

A drop places nodes, draws shadowing and fading, trains and estimates the
channels, then evaluates every requested power strategy for each CSI mode
and link direction. Seeds depend only on ``(run.seed, drop index)``, and
results are folded in drop order, so outputs do not depend on the number of
worker processes.
"""

import csv
import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from itertools import repeat

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
from threadpoolctl import threadpool_limits

from ._validation import ParameterError
from .association import build_association, build_beamformers, parse_mode
from .geometry import (
    PathLossParams,
    draw_channels,
    large_scale_gains,
    path_loss_matrix,
    place_nodes,
    shadowing_field,
)
from .optimize import (
    SolverConfig,
    slm_min_rate_dl,
    slm_min_rate_ul,
    slm_sum_rate_dl,
    slm_sum_rate_ul,
    uniform_dl,
    uniform_ul,
)
from .rates import dl_effective_channels, dl_rates, ul_effective_channels, ul_rates
from .training import NoiseModel, estimate_channels, generate_pilots, noise_variance

STRATEGIES = ("uniform", "srmax", "mrmax")
CSI_MODES = ("perfect", "estimated")
DIRECTIONS = ("dl", "ul")
PRESETS = ("high_density", "low_density")
CSV_HEADER = ("drop", "strategy", "csi", "direction", "user", "rate_bps")

# every accepted key with its default; None marks optional numbers
DEFAULTS = {
    "geometry.side_m": 1000.0,
    "geometry.n_aps": 20,
    "geometry.n_users": 4,
    "geometry.n_ap_antennas": 4,
    "geometry.n_ms_antennas": 2,
    "geometry.multiplexing_order": 2,
    "channel.carrier_mhz": 1900.0,
    "channel.h_ap_m": 15.0,
    "channel.h_ms_m": 1.65,
    "channel.d0_m": 10.0,
    "channel.d1_m": 50.0,
    "channel.sigma_sh_db": 8.0,
    "channel.delta": 0.5,
    "channel.d_decorr_m": 100.0,
    "channel.distance_unit_m": 1000.0,
    "noise.psd_dbm_hz": -174.0,
    "noise.noise_figure_db": 9.0,
    "noise.bandwidth_hz": 20e6,
    "noise.sigma2_w": None,
    "noise.sigma2_z": None,
    "training.tau_p": 8,
    "training.train_power_w": 0.1,
    "training.pilot_seed": None,
    "training.orthogonalize": "user",
    "association.mode": "cf",
    "power.p_max_ap_w": 0.2,
    "power.p_max_ms_w": 0.1,
    "power.dl_budget": "radiated",
    "solver.outer_tol": 1e-4,
    "solver.inner_tol": 1e-6,
    "solver.max_outer": 50,
    "solver.max_inner": 200,
    "solver.max_sweeps": 20,
    "solver.step_init": 1.0,
    "solver.armijo_c": 1e-4,
    "solver.armijo_shrink": 0.5,
    "solver.block_mode": None,
    "solver.n_starts": 1,
    "solver.start_seed": 0,
    "run.n_drops": 20,
    "run.seed": 0,
    "run.strategies": list(STRATEGIES),
    "run.csi": list(CSI_MODES),
    "run.directions": list(DIRECTIONS),
    "run.workers": 1,
    "run.drop_time_limit_s": 300.0,
    "run.output_dir": "results",
    "run.trace": False,
}

_OPTIONAL_TYPES = {
    "noise.sigma2_w": float,
    "noise.sigma2_z": float,
    "training.pilot_seed": int,
    "solver.block_mode": str,
}


class ConfigError(ParameterError):
    """Bad configuration: unknown key, wrong type or invalid value."""


class DropError(RuntimeError):
    """A drop failed; carries the drop index and the original exception."""

    def __init__(self, drop, cause):
        super().__init__(f"drop {drop}: {type(cause).__name__}: {cause}")
        self.drop = drop
        self.cause = cause


def flatten(mapping, prefix=""):
    """Nested tables to dotted keys; already dotted keys pass through."""
    flat = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key, value):
    default = DEFAULTS[key]
    kind = _OPTIONAL_TYPES.get(key, type(default))
    if value is None:
        if key in _OPTIONAL_TYPES:
            return None
        raise ConfigError(f"{key} may not be null")
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if kind is int:
        if (isinstance(value, bool) or not isinstance(value, (int, float))
                or not float(value).is_integer()):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        value = float(value)
        if not np.isfinite(value):
            raise ConfigError(f"{key} must be finite")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(value, str):
        value = [v for v in value.split(",") if v]
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{key} must be a list of strings")
    return list(value)


def _read_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("ucmimo.presets").joinpath(f"{name}.toml").read_text()
    return tomllib.loads(text)


@dataclass(frozen=True)
class SimulationConfig:
    """Fully resolved campaign configuration keyed by dotted names."""

    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        merged = dict(DEFAULTS)
        unknown = sorted(set(self.values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in self.values.items():
            merged[key] = _coerce(key, value)
        object.__setattr__(self, "values", merged)
        self._validate()

    def _validate(self):
        v = self.values
        if v["run.n_drops"] < 1:
            raise ConfigError("run.n_drops must be >= 1")
        if v["run.workers"] < 1:
            raise ConfigError("run.workers must be >= 1")
        if v["run.drop_time_limit_s"] <= 0:
            raise ConfigError("run.drop_time_limit_s must be > 0")
        for key, allowed in (("run.strategies", STRATEGIES), ("run.csi", CSI_MODES),
                             ("run.directions", DIRECTIONS)):
            if not v[key]:
                raise ConfigError(f"{key} must not be empty")
            bad = [s for s in v[key] if s not in allowed]
            if bad or len(set(v[key])) != len(v[key]):
                raise ConfigError(f"{key} entries must be distinct values from {allowed}")
        if v["power.dl_budget"] not in ("radiated", "coefficient"):
            raise ConfigError("power.dl_budget must be 'radiated' or 'coefficient'")
        if v["power.p_max_ap_w"] <= 0 or v["power.p_max_ms_w"] <= 0:
            raise ConfigError("power budgets must be > 0")
        if v["training.train_power_w"] <= 0:
            raise ConfigError("training.train_power_w must be > 0")
        for key in ("geometry.n_aps", "geometry.n_users", "geometry.n_ap_antennas",
                    "geometry.n_ms_antennas", "training.tau_p"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["geometry.side_m"] <= 0:
            raise ConfigError("geometry.side_m must be > 0")
        n_ms, order = v["geometry.n_ms_antennas"], v["geometry.multiplexing_order"]
        if order < 1 or n_ms % order:
            raise ConfigError("geometry.multiplexing_order must divide geometry.n_ms_antennas")
        if v["geometry.n_ap_antennas"] < n_ms:
            raise ConfigError("geometry.n_ap_antennas must be >= geometry.n_ms_antennas")
        if v["training.tau_p"] < n_ms:
            raise ConfigError("training.tau_p must be >= geometry.n_ms_antennas")
        if v["training.orthogonalize"] not in ("user", "all"):
            raise ConfigError("training.orthogonalize must be 'user' or 'all'")
        try:
            parse_mode(v["association.mode"])
            self.path_loss_params()
            self.solver_config()
            self.noise_model()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_mapping(cls, mapping):
        """Build from nested or dotted keys; a ``preset`` key loads a base preset."""
        flat = flatten(dict(mapping))
        base = {}
        preset = flat.pop("preset", None)
        if preset is not None:
            base = flatten(_read_preset(preset))
        base.update(flat)
        return cls(base)

    @classmethod
    def from_file(cls, path):
        """Load a TOML file (or a JSON file with a ``.json`` suffix)."""
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            if str(path).endswith(".json"):
                data = json.loads(raw.decode("utf-8"))
            else:
                data = tomllib.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a table of keys")
        return cls.from_mapping(data)

    @classmethod
    def preset(cls, name):
        return cls(flatten(_read_preset(name)))

    def updated(self, overrides):
        """Copy with some dotted keys replaced."""
        values = dict(self.values)
        values.update(flatten(dict(overrides)))
        return SimulationConfig(values)

    def to_dict(self):
        return dict(self.values)

    @property
    def n_drops(self):
        return self.values["run.n_drops"]

    @property
    def seed(self):
        return self.values["run.seed"]

    def path_loss_params(self):
        v = self.values
        return PathLossParams(
            carrier_mhz=v["channel.carrier_mhz"], h_ap_m=v["channel.h_ap_m"],
            h_ms_m=v["channel.h_ms_m"], d0_m=v["channel.d0_m"], d1_m=v["channel.d1_m"],
            sigma_sh_db=v["channel.sigma_sh_db"], delta=v["channel.delta"],
            d_decorr_m=v["channel.d_decorr_m"], distance_unit_m=v["channel.distance_unit_m"])

    def solver_config(self):
        names = ("outer_tol", "inner_tol", "max_outer", "max_inner", "max_sweeps", "step_init",
                 "armijo_c", "armijo_shrink", "block_mode", "n_starts", "start_seed")
        return SolverConfig(**{n: self.values[f"solver.{n}"] for n in names})

    def noise_model(self):
        """Receiver noise; both ends share the thermal value unless overridden."""
        v = self.values
        thermal = noise_variance(v["noise.psd_dbm_hz"], v["noise.bandwidth_hz"],
                                 v["noise.noise_figure_db"])
        sigma2_w = v["noise.sigma2_w"] if v["noise.sigma2_w"] is not None else thermal
        sigma2_z = v["noise.sigma2_z"] if v["noise.sigma2_z"] is not None else thermal
        return NoiseModel(sigma2_w, sigma2_z)


# ------------------------------------------------------------------- drops


@dataclass(frozen=True)
class DropInstance:
    """Everything random in one drop, before association and power control."""

    topology: object
    gains: object
    channels: object
    pilots: object
    noise: object


@dataclass(frozen=True)
class LinkSet:
    association: object
    beamformers: object
    dl: object
    ul: object


def drop_generators(seed, drop_index):
    """Independent generators for placement, shadowing, fading and training noise."""
    ss = np.random.SeedSequence([int(seed), int(drop_index)])
    return [np.random.default_rng(child) for child in ss.spawn(4)]


def build_drop(config, drop_index):
    """Place nodes and draw channels and pilot-matched estimates for one drop."""
    v = config.values
    place_rng, shadow_rng, fading_rng, train_rng = drop_generators(config.seed, drop_index)
    topology = place_nodes(v["geometry.side_m"], v["geometry.n_aps"], v["geometry.n_users"],
                           place_rng, v["geometry.n_ap_antennas"], v["geometry.n_ms_antennas"],
                           v["geometry.multiplexing_order"])
    params = config.path_loss_params()
    z = shadowing_field(topology, params, shadow_rng)
    gains = large_scale_gains(path_loss_matrix(topology, params), z, params.sigma_sh_db)
    channels = draw_channels(gains, topology, fading_rng)
    noise = config.noise_model()
    pilots = generate_pilots(topology.n_users, topology.n_ms_antennas, v["training.tau_p"],
                             v["training.train_power_w"], seed=v["training.pilot_seed"],
                             orthogonalize=v["training.orthogonalize"])
    channels = estimate_channels(channels, pilots, noise.sigma2_w, train_rng)
    return DropInstance(topology, gains, channels, pilots, noise)


def build_links(instance, csi, association_mode, bandwidth_hz):
    """Association, beamformers and effective channels for one CSI mode.

    Perfect CSI copies the true channels into the estimates, so both modes
    share the same true propagation channels.
    """
    if csi not in CSI_MODES:
        raise ParameterError(f"csi must be one of {CSI_MODES}")
    channels = instance.channels
    if csi == "perfect":
        channels = channels.with_perfect_csi()
    est = channels.estimated_channels
    association = build_association(est, association_mode)
    beamformers = build_beamformers(est, instance.topology.multiplexing_orders)
    dl = dl_effective_channels(channels, association, beamformers, instance.noise.sigma2_z,
                               bandwidth_hz)
    ul = ul_effective_channels(channels, association, beamformers, instance.noise.sigma2_w,
                               bandwidth_hz)
    return LinkSet(association, beamformers, dl, ul)


def allocate(links, strategy, direction, config, deadline=None):
    """Run one power strategy; returns ``(powers, trace or None)``."""
    v = config.values
    cfg = config.solver_config()
    if direction == "dl":
        p_max = np.full(links.dl.n_aps, v["power.p_max_ap_w"])
        budget = v["power.dl_budget"]
        if strategy == "uniform":
            weight = links.dl.tx_weight if budget == "radiated" else np.ones_like(links.dl.tx_weight)
            return uniform_dl(links.association, weight, p_max).dl, None
        solver = slm_sum_rate_dl if strategy == "srmax" else slm_min_rate_dl
        alloc, trace = solver(links.dl, None, p_max, cfg, budget=budget, deadline=deadline)
        return alloc.dl, trace
    p_max = np.full(links.ul.n_users, v["power.p_max_ms_w"])
    if strategy == "uniform":
        return uniform_ul(links.ul.n_users, v["geometry.n_ms_antennas"], p_max).ul, None
    solver = slm_sum_rate_ul if strategy == "srmax" else slm_min_rate_ul
    alloc, trace = solver(links.ul, p_max, cfg, deadline=deadline)
    return alloc.ul, trace


@dataclass
class DropResult:
    drop: int
    rows: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    capped: bool = False
    error: str = None


def run_drop(config, drop_index):
    """All strategies, CSI modes and directions for one drop.

    Rows are ``(drop, strategy, csi, direction, user, rate_bps)`` in a fixed
    order. Errors propagate with the drop index attached.
    """
    v = config.values
    mode = v["association.mode"]
    result = DropResult(int(drop_index))
    deadline = time.monotonic() + v["run.drop_time_limit_s"]
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            instance = build_drop(config, drop_index)
            for csi in v["run.csi"]:
                links = build_links(instance, csi, mode, v["noise.bandwidth_hz"])
                for strategy in v["run.strategies"]:
                    for direction in v["run.directions"]:
                        powers, trace = allocate(links, strategy, direction, config, deadline)
                        eff = links.dl if direction == "dl" else links.ul
                        rates = dl_rates(eff, powers) if direction == "dl" else ul_rates(eff, powers)
                        rates = np.maximum(rates, 0.0)
                        for user, rate in enumerate(rates):
                            result.rows.append((result.drop, strategy, csi, direction, user,
                                                float(rate)))
                        if trace is not None:
                            result.traces[f"{strategy}/{csi}/{direction}"] = trace.to_dict()
                            result.capped = result.capped or trace.timed_out
        result.warnings = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    except Exception as exc:
        raise DropError(int(drop_index), exc) from exc
    return result


def _run_drop_safely(config, drop_index):
    # single BLAS thread keeps floating point reductions identical everywhere
    with threadpool_limits(limits=1):
        try:
            return run_drop(config, drop_index)
        except DropError as exc:  # one bad drop must not sink the campaign
            return DropResult(int(drop_index), error=f"{type(exc.cause).__name__}: {exc.cause}")


# ---------------------------------------------------------------- campaigns


@dataclass
class RateReport:
    """Per-user rates of a campaign plus per-drop diagnostics."""

    config: SimulationConfig
    drops: list

    @property
    def successful(self):
        return [d for d in self.drops if d.error is None]

    @property
    def failed(self):
        return [{"drop": d.drop, "error": d.error} for d in self.drops if d.error is not None]

    @property
    def rows(self):
        return [row for d in self.successful for row in d.rows]

    def rates(self, strategy, csi, direction):
        """(n_successful_drops, K) matrix of per-user rates."""
        per_drop = [[r[5] for r in d.rows if r[1:4] == (strategy, csi, direction)]
                    for d in self.successful]
        per_drop = [p for p in per_drop if p]
        if not per_drop:
            return np.empty((0, 0))
        return np.array(per_drop, dtype=float)

    def cdf_samples(self, strategy, csi, direction):
        """Sorted per-user rates pooled across drops."""
        return np.sort(self.rates(strategy, csi, direction).ravel())

    def summary(self):
        v = self.config.values
        groups = {}
        for strategy in v["run.strategies"]:
            for csi in v["run.csi"]:
                for direction in v["run.directions"]:
                    r = self.rates(strategy, csi, direction)
                    if r.size == 0:
                        continue
                    sums, mins = r.sum(axis=1), r.min(axis=1)
                    groups[f"{strategy}/{csi}/{direction}"] = {
                        "strategy": strategy, "csi": csi, "direction": direction,
                        "n_drops": int(len(r)), "n_samples": int(r.size),
                        "mean_sum_rate_bps": float(np.mean(sums)),
                        "median_sum_rate_bps": float(np.median(sums)),
                        "mean_min_rate_bps": float(np.mean(mins)),
                        "median_min_rate_bps": float(np.median(mins)),
                        "mean_user_rate_bps": float(np.mean(r)),
                        "p5_user_rate_bps": float(np.percentile(r, 5)),
                    }
        return {
            "n_drops_requested": len(self.drops),
            "n_drops_successful": len(self.successful),
            "n_drops_failed": len(self.failed),
            "failed_drops": self.failed,
            "capped_drops": [d.drop for d in self.successful if d.capped],
            "groups": groups,
        }

    def traces(self):
        return {str(d.drop): d.traces for d in self.successful}

    def warnings(self):
        return {str(d.drop): d.warnings for d in self.successful if d.warnings}


def run_campaign(config, workers=None):
    """Run every drop, in parallel when ``workers > 1``, folding in drop order."""
    workers = config["run.workers"] if workers is None else int(workers)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    indices = range(config.n_drops)
    if workers == 1:
        drops = [_run_drop_safely(config, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order whatever the completion order
            drops = list(pool.map(_run_drop_safely, repeat(config), indices))
    return RateReport(config, drops)


def _format_rate(rate):
    return repr(float(rate))


def emit_results(report, output_dir, trace=False):
    """Write ``rates.csv``, ``summary.json``, ``config.echo.json`` (and traces)."""
    os.makedirs(output_dir, exist_ok=True)
    if not os.access(output_dir, os.W_OK | os.X_OK):
        raise PermissionError(f"output directory {output_dir!r} is not writable")
    paths = {
        "rates": os.path.join(output_dir, "rates.csv"),
        "summary": os.path.join(output_dir, "summary.json"),
        "config": os.path.join(output_dir, "config.echo.json"),
    }
    with open(paths["rates"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for drop, strategy, csi, direction, user, rate in report.rows:
            writer.writerow((drop, strategy, csi, direction, user, _format_rate(rate)))
    summary = report.summary()
    summary["warnings"] = report.warnings()
    with open(paths["summary"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["config"], "w") as fh:
        json.dump(report.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if trace:
        paths["traces"] = os.path.join(output_dir, "traces.json")
        with open(paths["traces"], "w") as fh:
            json.dump(report.traces(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return paths


def read_rates_csv(path):
    """Parse ``rates.csv`` back into row tuples."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [(int(d), s, c, r, int(u), float(x)) for d, s, c, r, u, x in reader]
