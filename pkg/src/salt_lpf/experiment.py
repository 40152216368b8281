"""Twin experiments: initial conditions, burn-in, filter runs and persistence."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .filtering import (
    AssimilationDiagnostics,
    Ensemble,
    MCMCJitter,
    NoJitter,
    Roughening,
    TemperingConfig,
    pf_assimilate,
)
from .grid import GridSpec, StaggeredState, fill_ghosts, restrict_array
from .localization import LocalizationConfig, lpf_assimilate
from .metrics import MetricRecord, compute_metrics, write_metrics
from .noise import build_jitter_basis, build_noise_basis
from .observations import ObservationSchedule, synthesize, write_batches
from .swe import ModelParams, propagate

# stream tags for np.random.default_rng((seed, tag, ...))
TAG_BURN_IN, TAG_PICK, TAG_SIGNAL, TAG_OBS, TAG_PARTICLE, TAG_FILTER, TAG_NOISE = range(1, 8)


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# initial conditions


def eta_bar(x, y):
    """Closed-form initial height."""
    return (
        1.5
        + 0.1 * np.arctan(y - 0.5)
        - 0.05 * np.arctan(0.5 * y)
        + 0.03 * np.arctan(0.9 * x * (1 - x))
        + 0.2 * np.sin(2 * np.pi * x)
        + 0.03 * np.sin(4 * np.pi * x) * np.sin(y) ** 4
        - 0.05 * np.exp(-0.5 * x * (1 - x))
        + 0.05 * np.exp(-0.5 * y)
        + 0.1 * np.sin(2 * np.pi * y) * np.cos(2 * np.pi * x)
        + 0.3 * np.cos(6 * np.pi * x) ** 2
    )


def initial_eta(grid: GridSpec) -> np.ndarray:
    """Initial height at cell centres, ghosts included."""
    return eta_bar(*grid.coords("eta"))


def geostrophic_velocity(eta: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """``-(1/f)(Ro/Fr^2) grad_perp(eta)`` with ``grad_perp = (-d/dy, d/dx)``,
    each component then divided by its maximum magnitude.

    ``eta`` is a ghosted height field; gradients are centred differences
    averaged onto the u- and v-points.
    """
    e = np.array(eta, dtype=float)
    d = e.shape[-1] - 2
    dx = 1.0 / d
    c = -(1.0 / params.f) * params.Ro / params.Fr**2
    u = np.zeros_like(e)
    v = np.zeros_like(e)
    # d(eta)/dy at u-points: mean of the two adjacent cells
    dy_c = (e[:, 2:] - e[:, :-2]) / (2 * dx)  # rows 0..d+1, cols 1..d
    u[1:-1, 1:-1] = c * -0.5 * (dy_c[:-2] + dy_c[1:-1])
    # d(eta)/dx at v-points: mean of the cells south and north of the face
    dx_c = (e[2:, :] - e[:-2, :]) / (2 * dx)  # rows 1..d, cols 0..d+1
    v[1:-1, 1:-1] = c * 0.5 * (dx_c[:, :-2] + dx_c[:, 1:-1])
    su, sv = np.abs(u).max(), np.abs(v).max()
    if su == 0.0 or sv == 0.0:
        raise ValueError("flat height field has no geostrophic velocity to normalise")
    return u / su, v / sv


def initial_state(grid: GridSpec, params: ModelParams) -> StaggeredState:
    data = np.zeros(grid.shape)
    data[2] = initial_eta(grid)
    fill_ghosts(data)
    data[0], data[1] = geostrophic_velocity(data[2], params)
    return StaggeredState(fill_ghosts(data))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    regime: str = "S"
    d: int = 64
    n_noise_modes: int = 25
    noise_p: float = 2.0
    sigma_noise: float = 0.1
    # observations
    obs_kind: str = "fixed_grid"
    d_obs: int = 16
    r: int = 10
    sigma_obs: float = 0.05
    strip_width: int = 2
    strip_positions: tuple[int, ...] = ()
    # filter
    filter: str = "pf"
    n_particles: int = 20
    n_ess_fraction: float = 0.8
    tempering: bool = True
    bisection_tol: float = 1e-4
    tol_ess_fraction: float = 0.01
    max_temper_iters: int = 200
    jitter_kind: str = "roughening"
    sigma_jit: float = 0.01
    n_jit_modes: int = 50
    rho: float = 0.99
    m_jit: int = 10
    # localization
    n_loc: int = 4
    alpha: float = 500.0
    overlap_halfwidth: int = 3
    wrap_ew: bool = True
    # run
    n_assimilations: int = 50
    horizon_steps: int = 0
    metric_every: int = 10
    burn_in_det: int = 2000
    burn_in_stoch: int = 500
    seed: int = 0
    noise_seed: int = 0
    workers: int = 1
    snapshot_every: int = 0

    def __post_init__(self):
        if self.filter not in ("pf", "lpf"):
            raise ConfigError(f"filter must be 'pf' or 'lpf', got {self.filter!r}")
        for name in ("d", "n_particles", "r", "metric_every", "n_noise_modes", "n_jit_modes", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_particles < 2:
            raise ConfigError("need at least two particles")
        if self.horizon_steps < 0 or self.n_assimilations < 0:
            raise ConfigError("run length must be non-negative")
        if self.tol_ess_fraction < 0:
            raise ConfigError("tol_ess_fraction must be non-negative")
        if self.burn_in_det < 0 or self.burn_in_stoch < 0:
            raise ConfigError("burn-in lengths must be non-negative")
        try:
            ModelParams.regime(self.regime)
            self.schedule()
            self.tempering_config()
            LocalizationConfig(self.n_loc, self.alpha, self.overlap_halfwidth, self.wrap_ew)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.d)

    @property
    def params(self) -> ModelParams:
        return ModelParams.regime(self.regime)

    @property
    def total_assimilations(self) -> int:
        """``horizon_steps // r`` when a fixed horizon is set."""
        if self.horizon_steps:
            return self.horizon_steps // self.r
        return self.n_assimilations

    def schedule(self) -> ObservationSchedule:
        return ObservationSchedule(
            self.obs_kind, self.r, self.sigma_obs,
            d_obs=self.d_obs if self.obs_kind == "fixed_grid" else None,
            width=self.strip_width, positions=tuple(self.strip_positions),
        )

    def tempering_config(self) -> TemperingConfig:
        return TemperingConfig(
            enabled=self.tempering, bisection_tol=self.bisection_tol,
            tol_ess=self.tol_ess_fraction * self.n_particles if self.tol_ess_fraction > 0 else None,
            max_temper_iters=self.max_temper_iters, jitter_kind=self.jitter_kind,
            sigma_jit=self.sigma_jit, n_jit_modes=self.n_jit_modes, rho=self.rho, m_jit=self.m_jit,
        )

    def localization(self) -> LocalizationConfig:
        return LocalizationConfig(self.n_loc, self.alpha, self.overlap_halfwidth, self.wrap_ew)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_SECTIONS = {
    "model": ("regime", "d", "n_noise_modes", "noise_p", "sigma_noise"),
    "observations": ("obs_kind", "d_obs", "r", "sigma_obs", "strip_width", "strip_positions"),
    "filter": ("filter", "n_particles", "n_ess_fraction", "tempering", "bisection_tol",
               "tol_ess_fraction", "max_temper_iters"),
    "jitter": ("jitter_kind", "sigma_jit", "n_jit_modes", "rho", "m_jit"),
    "localization": ("n_loc", "alpha", "overlap_halfwidth", "wrap_ew"),
    "run": ("n_assimilations", "horizon_steps", "metric_every", "burn_in_det", "burn_in_stoch",
            "seed", "noise_seed", "workers", "snapshot_every"),
}
_DEFAULTS = ExperimentConfig.__dataclass_fields__


def _coerce(name: str, text: str):
    default = _FIELDS[name].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    changes = {}
    for key, raw in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        changes[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    try:
        return dataclasses.replace(base, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = raw
    return config_from_mapping(values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = getattr(cfg, k)
            if isinstance(v, tuple):
                v = " ".join(str(t) for t in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# snapshots

MAGIC = b"LPF1"


def save_snapshot(path, state: StaggeredState) -> None:
    """``LPF1``, uint32 rank, uint32 extents, float64 data; little-endian, row-major."""
    data = np.ascontiguousarray(state.data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.tobytes(order="C"))


def load_snapshot(path) -> StaggeredState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a snapshot file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape))
    if len(raw) != offset + 8 * count:
        raise ValueError(f"{path}: truncated snapshot")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
    return StaggeredState(data.astype(float))


# --------------------------------------------------------------------------
# burn-in


@lru_cache(maxsize=8)
def _deterministic_spinup(d: int, regime: str, n_steps: int) -> np.ndarray:
    grid = GridSpec(d)
    params = ModelParams.regime(regime)
    return propagate(initial_state(grid, params), params, n_steps).data


def noise_basis_for(cfg: ExperimentConfig):
    rng = np.random.default_rng((cfg.noise_seed, TAG_NOISE))
    return build_noise_basis(cfg.grid, cfg.n_noise_modes, cfg.noise_p, cfg.sigma_noise, rng)


@lru_cache(maxsize=8)
def _burn_in_cached(d, regime, n_modes, p, sigma, noise_seed, n_particles, det, stoch, seed):
    cfg = ExperimentConfig(
        regime=regime, d=d, n_noise_modes=n_modes, noise_p=p, sigma_noise=sigma,
        noise_seed=noise_seed, n_particles=n_particles, burn_in_det=det, burn_in_stoch=stoch, seed=seed,
    )
    base = _deterministic_spinup(d, regime, det)
    runs = np.repeat(base[None], n_particles + 1, axis=0)
    if stoch > 0:
        rngs = [np.random.default_rng((seed, TAG_BURN_IN, i)) for i in range(n_particles + 1)]
        runs = propagate(StaggeredState(runs), cfg.params, stoch, noise_basis_for(cfg), rngs).data
    pick = int(np.random.default_rng((seed, TAG_PICK)).integers(n_particles + 1))
    others = np.delete(runs, pick, axis=0)
    return runs[pick], others


def burn_in_pipeline(cfg: ExperimentConfig) -> tuple[StaggeredState, StaggeredState]:
    """Signal and ensemble at time 0.

    A deterministic spin-up from the closed-form initial state is followed by
    ``n_particles + 1`` independent stochastic runs; one of them, chosen at
    random, becomes the signal and the others the ensemble. Results are cached
    per process.
    """
    sig, ens = _burn_in_cached(
        cfg.d, cfg.regime, cfg.n_noise_modes, cfg.noise_p, cfg.sigma_noise, cfg.noise_seed,
        cfg.n_particles, cfg.burn_in_det, cfg.burn_in_stoch, cfg.seed,
    )
    return StaggeredState(sig.copy()), StaggeredState(ens.copy())


def reference_mean_speed(cfg: ExperimentConfig, n_steps: int = 2000) -> float:
    """Time-averaged ``sqrt(||u||^2 + ||v||^2)`` of a deterministic run."""
    params = cfg.params
    state = initial_state(cfg.grid, params)
    speeds = []
    for _ in range(n_steps // 10):
        state = propagate(state, params, 10)
        i = state.interior()
        speeds.append(np.sqrt(np.mean(i[0] ** 2) + np.mean(i[1] ** 2)))
    return float(np.mean(speeds))


# --------------------------------------------------------------------------
# twin experiment


@dataclass
class RunRecord:
    config: ExperimentConfig
    metrics: list[MetricRecord] = field(default_factory=list)
    diagnostics: list[AssimilationDiagnostics] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    observations: list = field(default_factory=list)

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.metrics])

    def tail_mean(self, name: str, count: int = 25) -> float:
        return float(np.mean(self.series(name)[-count:]))

    def mean_tempering_steps(self) -> float:
        """Mean tempering iterations per assimilation (per region for the local filter)."""
        vals = []
        for dg in self.diagnostics:
            if dg.regions:
                vals.extend(r.tempering_steps for r in dg.regions)
            else:
                vals.append(dg.tempering_steps)
        return float(np.mean(vals)) if vals else 0.0


def filter_rng(seed: int, k: int, region: int) -> np.random.Generator:
    return np.random.default_rng((seed, TAG_FILTER, k, region))


def run_twin_experiment(
    cfg: ExperimentConfig, output_dir=None, keep_observations: bool = False, observer=None
) -> RunRecord:
    """Run the signal and a PF or LPF side by side and collect metrics.

    Metrics are taken every ``metric_every`` model steps (after the update
    when that time is an observation time). ``observer(k, step, signal,
    ensemble)`` is called at the same times with the current states.
    """
    t0 = time.perf_counter()
    rec = RunRecord(cfg)
    grid, params = cfg.grid, cfg.params
    noise = noise_basis_for(cfg)
    signal, ens_states = burn_in_pipeline(cfg)
    rec.timings["burn_in"] = time.perf_counter() - t0

    schedule = cfg.schedule()
    tcfg = cfg.tempering_config()
    n = cfg.n_particles
    particle_rngs = [np.random.default_rng((cfg.seed, TAG_PARTICLE, i)) for i in range(n)]
    signal_rng = [np.random.default_rng((cfg.seed, TAG_SIGNAL))]
    obs_rng = np.random.default_rng((cfg.seed, TAG_OBS))
    ensemble = Ensemble.uniform(ens_states, cfg.n_ess_fraction, particle_rngs)

    jbasis = build_jitter_basis(grid, cfg.n_jit_modes, cfg.sigma_jit)
    loc = decomp = None
    region_bases: dict[int, object] = {}
    executor = None
    if cfg.filter == "lpf":
        loc = cfg.localization()
        decomp = loc.decomposition(grid)
        region_bases = {j: jbasis.restrict(box, grid.d) for j, box in enumerate(decomp.boxes)}
        if cfg.workers > 1:
            executor = ThreadPoolExecutor(cfg.workers)
    global_basis = jbasis.interior()

    out = Path(output_dir) if output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    batches = []
    timing = {"forecast": 0.0, "assimilation": 0.0, "metrics": 0.0}

    def record_metrics(k: int, step: int) -> None:
        t = time.perf_counter()
        locs = schedule.locations_at(max(k, 1), grid)
        rec.metrics.append(compute_metrics(k, step, signal, ensemble.states, locs))
        if observer is not None:
            observer(k, step, signal, ensemble.states)
        if out and cfg.snapshot_every and step % cfg.snapshot_every == 0:
            for tag, st in (("signal", signal), ("ensemble", ensemble.states)):
                name = f"{tag}_{step:07d}.lpf"
                save_snapshot(out / name, st)
                rec.snapshots.append(name)
        timing["metrics"] += time.perf_counter() - t

    step = 0
    record_metrics(0, 0)
    try:
        for k in range(1, cfg.total_assimilations + 1):
            t = time.perf_counter()
            prev = ensemble.states.data.copy()
            paths = []
            target = step + cfg.r
            while step < target:
                seg = min(target - step, cfg.metric_every - step % cfg.metric_every)
                signal = propagate(signal, params, seg, noise, signal_rng, step_offset=step)
                states, dW = propagate(ensemble.states, params, seg, noise, particle_rngs,
                                       record=True, step_offset=step)
                ensemble = Ensemble(states, ensemble.weights, ensemble.n_ess, particle_rngs)
                paths.append(dW)
                step += seg
                if step % cfg.metric_every == 0 and step != target:
                    timing["forecast"] += time.perf_counter() - t
                    record_metrics(k - 1, step)
                    t = time.perf_counter()
            timing["forecast"] += time.perf_counter() - t

            t = time.perf_counter()
            batch = synthesize(signal.eta, schedule.locations_at(k, grid), cfg.sigma_obs, obs_rng, k)
            if keep_observations or out:
                batches.append(batch)
            path_arr = np.concatenate(paths, axis=-2)

            def mcmc(project=None):
                return MCMCJitter(
                    prev, path_arr,
                    lambda p, inc: propagate(StaggeredState(p), params, cfg.r, noise, increments=inc).data,
                    params.dt, cfg.rho, cfg.m_jit, project,
                )

            if cfg.filter == "pf":
                if tcfg.jitter_kind == "roughening":
                    jitter = Roughening(global_basis)
                elif tcfg.jitter_kind == "mcmc":
                    jitter = mcmc()
                else:
                    jitter = NoJitter()
                ensemble, diag = pf_assimilate(ensemble, batch, tcfg, filter_rng(cfg.seed, k, 0), jitter)
            else:
                def region_jitter(j, box):
                    if tcfg.jitter_kind == "roughening":
                        return Roughening(region_bases[j])
                    if tcfg.jitter_kind == "mcmc":
                        return mcmc(lambda g, box=box: restrict_array(g, box, grid.d))
                    return NoJitter()

                ensemble, diag = lpf_assimilate(
                    ensemble, batch, loc, tcfg, lambda j, k=k: filter_rng(cfg.seed, k, j),
                    region_jitter, decomp, executor,
                )
            ensemble.rng_streams = particle_rngs
            rec.diagnostics.append(diag)
            timing["assimilation"] += time.perf_counter() - t
            if step % cfg.metric_every == 0:
                record_metrics(k, step)
    finally:
        if executor is not None:
            executor.shutdown()

    rec.timings.update(timing)
    rec.timings["total"] = time.perf_counter() - t0
    if out:
        write_run(rec, out, batches)
    rec.observations = batches
    return rec


# --------------------------------------------------------------------------
# persistence


DIAG_HEADER = ("k", "ess_before", "tempering_steps", "mcmc_iterations")
REGION_HEADER = ("k", "region", "ess", "tempering_steps")


def write_diagnostics(path, diagnostics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_HEADER)
        for dg in diagnostics:
            w.writerow([dg.k, repr(dg.ess_before), dg.tempering_steps, repr(float(dg.mcmc_iterations))])


def write_region_diagnostics(path, diagnostics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REGION_HEADER)
        for dg in diagnostics:
            for r in dg.regions:
                w.writerow([dg.k, r.region, repr(r.ess), r.tempering_steps])


def write_run(rec: RunRecord, out: Path, batches=()) -> None:
    write_metrics(out / "metrics.csv", rec.metrics)
    write_diagnostics(out / "diagnostics.csv", rec.diagnostics)
    if rec.config.filter == "lpf":
        write_region_diagnostics(out / "regions.csv", rec.diagnostics)
    if batches:
        write_batches(out / "observations.csv", batches)
    lines = [
        f"version = {__version__}",
        f"seed = {rec.config.seed}",
        f"noise_seed = {rec.config.noise_seed}",
        "files = " + " ".join(["metrics.csv", "diagnostics.csv"] + rec.snapshots),
    ]
    lines += [f"time_{k} = {v:.3f}" for k, v in rec.timings.items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n\n" + dump_config(rec.config))


def simulate_signal(cfg: ExperimentConfig, output_dir=None) -> tuple[list[StaggeredState], list]:
    """Signal trajectory at observation times with its synthetic observations."""
    grid, params = cfg.grid, cfg.params
    noise = noise_basis_for(cfg)
    signal, _ = burn_in_pipeline(cfg)
    schedule = cfg.schedule()
    signal_rng = [np.random.default_rng((cfg.seed, TAG_SIGNAL))]
    obs_rng = np.random.default_rng((cfg.seed, TAG_OBS))
    states, batches = [signal], []
    for k in range(1, cfg.total_assimilations + 1):
        signal = propagate(signal, params, cfg.r, noise, signal_rng)
        states.append(signal)
        batches.append(synthesize(signal.eta, schedule.locations_at(k, grid), cfg.sigma_obs, obs_rng, k))
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, st in enumerate(states):
            save_snapshot(out / f"signal_{k * cfg.r:07d}.lpf", st)
        write_batches(out / "observations.csv", batches)
        (out / "manifest.txt").write_text(f"version = {__version__}\n\n" + dump_config(cfg))
    return states, batches


def metrics_from_snapshots(directory, cfg: ExperimentConfig) -> list[MetricRecord]:
    """Recompute metrics from ``signal_*.lpf`` / ``ensemble_*.lpf`` pairs."""
    d = Path(directory)
    sigs = sorted(d.glob("signal_*.lpf"))
    if not sigs:
        raise FileNotFoundError(f"no snapshots in {d}")
    schedule = cfg.schedule()
    out = []
    for s in sigs:
        step = int(s.stem.split("_")[1])
        e = d / f"ensemble_{step:07d}.lpf"
        if not e.exists():
            raise FileNotFoundError(f"missing {e.name}")
        k = step // cfg.r
        sig, ens = load_snapshot(s), load_snapshot(e)
        out.append(compute_metrics(k, step, sig, ens, schedule.locations_at(max(k, 1), GridSpec(sig.d))))
    return out
