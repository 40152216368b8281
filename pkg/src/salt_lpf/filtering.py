"""Particle filter machinery: weights, ESS, resampling, tempering and jittering.

Particles are handled as raw arrays with a leading particle axis. The same
tempering loop serves the global filter (ghosted states) and the local filter
(interior blocks of one subregion); only the likelihood and jitter callables
differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .grid import StaggeredState, fill_ghosts
from .noise import JitterBasis
from .observations import ObservationBatch, global_log_likelihood


class DegenerateWeightsError(ValueError):
    """Every particle has zero likelihood."""


class TemperingError(RuntimeError):
    def __init__(self, message: str, increments: Sequence[float]):
        self.increments = list(increments)
        super().__init__(f"{message} (after {len(self.increments)} iterations, "
                         f"cumulative temperature {sum(self.increments):.6g})")


# --------------------------------------------------------------------------
# weights


def normalize_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0:
        raise ValueError("empty weight vector")
    m = np.max(lw)
    if not np.isfinite(m):
        raise DegenerateWeightsError(f"no finite log-weight (max = {m})")
    w = np.exp(lw - m)
    return w / w.sum()


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def _log(weights) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(weights, dtype=float))


def tempered_weights(weights, phi: float) -> np.ndarray:
    """``w_i^phi`` renormalised, computed in the log domain."""
    if not 0.0 < phi <= 1.0:
        raise ValueError(f"temperature must lie in (0, 1], got {phi}")
    return normalize_weights(phi * _log(weights))


def _ess_at(logw, phi: float) -> float:
    if isinstance(logw, tuple):
        return ess(normalize_weights(logw[1] + phi * logw[0]))
    return ess(normalize_weights(phi * logw))


def find_temperature(
    weights,
    n_ess: float,
    remaining: float = 1.0,
    tol: float = 1e-4,
    tol_ess: float | None = None,
    log_weights=None,
    log_base=None,
) -> float:
    """Largest increment ``delta`` in ``(0, remaining]`` keeping the tempered ESS >= ``n_ess``.

    Bisection on ``delta`` until the bracket is narrower than ``tol``; the
    lower end is returned so the ESS target is never undershot. With
    ``tol_ess`` set, the search stops early once the ESS lies within
    ``tol_ess`` of the target. The result is at least ``min(tol, remaining)``,
    which bounds the number of tempering iterations. ``log_base`` are
    log-weights added untempered, as ``log_base + delta * log w``.
    """
    logw = _log(weights) if log_weights is None else np.asarray(log_weights, dtype=float)
    if remaining <= 0:
        raise ValueError("remaining temperature must be positive")
    if log_base is not None:
        logw = (logw, np.asarray(log_base, dtype=float))
    if _ess_at(logw, remaining) >= n_ess:
        return float(remaining)
    lo, hi = 0.0, float(remaining)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        e = _ess_at(logw, mid)
        if tol_ess is not None and abs(e - n_ess) <= tol_ess:
            return mid
        if e >= n_ess:
            lo = mid
        else:
            hi = mid
    return float(min(max(lo, tol), remaining))


# --------------------------------------------------------------------------
# resampling


def resample_sus(weights, rng: np.random.Generator | None = None, u0: float | None = None) -> np.ndarray:
    """Offspring counts from stochastic universal sampling.

    One uniform ``u0`` in ``[0, 1/N)`` and the comb ``u0 + r/N``; particle ``i``
    receives the comb points that fall in its cumulative-weight bin.
    """
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if u0 is None:
        u0 = rng.uniform(0.0, 1.0 / n)
    cum = np.cumsum(w)
    cum /= cum[-1]
    points = u0 + np.arange(n) / n
    idx = np.minimum(np.searchsorted(cum, points, side="right"), n - 1)
    return np.bincount(idx, minlength=n)


def parent_child_map(counts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Turn offspring counts into ``(ancestors, children, parents)``.

    Surviving particles keep their slot. Discarded slots, in index order, are
    handed to the extra copies of parents with count > 1, also in index
    order. ``ancestors[i]`` is the particle slot ``i`` now descends from.
    """
    counts = np.asarray(counts, dtype=int)
    if counts.sum() != len(counts):
        raise ValueError("offspring counts must sum to the ensemble size")
    children = np.flatnonzero(counts == 0)
    parents = np.repeat(np.arange(len(counts)), np.maximum(counts - 1, 0))
    ancestors = np.arange(len(counts))
    ancestors[children] = parents
    return ancestors, children, parents


# --------------------------------------------------------------------------
# jittering


class Jitter(Protocol):
    def reindex(self, ancestors: np.ndarray) -> None: ...

    def __call__(
        self,
        data: np.ndarray,
        children: np.ndarray,
        parents: np.ndarray,
        rng: np.random.Generator,
        temperature: float,
        loglik: np.ndarray,
        evaluate: Callable,
    ) -> int: ...


class NoJitter:
    def reindex(self, ancestors):
        pass

    def __call__(self, data, children, parents, rng, temperature, loglik, evaluate) -> int:
        return 0


class Roughening:
    """Add an independent smooth perturbation to every child.

    ``basis`` must have the interior shape of the particles it acts on: either
    the full interior (ghosted global particles, ghosts refilled afterwards) or
    a subregion block.
    """

    def __init__(self, basis: JitterBasis):
        self.basis = basis

    def reindex(self, ancestors):
        pass

    def __call__(self, data, children, parents, rng, temperature, loglik, evaluate) -> int:
        if len(children) == 0 or self.basis.sigma_jit == 0.0:
            return 0
        z = rng.standard_normal((len(children), self.basis.n_modes))
        pert = self.basis.sigma_jit * np.tensordot(z, self.basis.modes, axes=(-1, 0))
        shape = self.basis.modes.shape[-2:]
        if data.shape[-2:] == shape:
            data[children] += pert
        elif data.shape[-2:] == (shape[0] + 2, shape[1] + 2):
            data[children, :, 1:-1, 1:-1] += pert
            data[children] = fill_ghosts(data[children])
        else:
            raise ValueError(f"jitter basis shape {shape} does not fit particles {data.shape}")
        return 0


class MCMCJitter:
    """Metropolis jittering by re-propagating from the previous assimilation time.

    ``propagate(prev, increments)`` advances a batch of previous states with
    the given Brownian increments; ``project`` maps the result onto the
    particle representation used by the tempering loop (identity for the
    global filter, restriction to a box for the local one). The previous
    states and noise paths are reindexed alongside every resampling.
    """

    def __init__(
        self,
        prev: np.ndarray,
        paths: np.ndarray,
        propagate: Callable[[np.ndarray, np.ndarray], np.ndarray],
        dt: float,
        rho: float = 0.99,
        m_jit: int = 10,
        project: Callable[[np.ndarray], np.ndarray] | None = None,
    ):
        if not 0.0 < rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if m_jit < 1:
            raise ValueError("m_jit must be at least 1")
        self.prev = np.array(prev)
        self.paths = np.array(paths)
        self.propagate = propagate
        self.dt = dt
        self.rho = rho
        self.m_jit = int(m_jit)
        self.project = project or (lambda x: x)
        self.rejections: list[int] = []

    def reindex(self, ancestors):
        self.prev = self.prev[ancestors]
        self.paths = self.paths[ancestors]

    def __call__(self, data, children, parents, rng, temperature, loglik, evaluate) -> int:
        """Returns the largest number of rejected proposals among the children."""
        pending = np.arange(len(children))
        rejected = np.zeros(len(children), dtype=int)
        blend = math.sqrt(max(0.0, 1.0 - self.rho**2))
        for _ in range(self.m_jit):
            if len(pending) == 0:
                break
            c = children[pending]
            p = parents[pending]
            fresh = rng.normal(0.0, math.sqrt(self.dt), size=self.paths[p].shape)
            path = self.rho * self.paths[p] + blend * fresh
            proposal = self.project(self.propagate(self.prev[p], path))
            ll_prop = evaluate(proposal, c)
            u = rng.uniform(size=len(c))
            with np.errstate(under="ignore", over="ignore"):
                accept = np.log(u) <= temperature * (ll_prop - loglik[p])
            data[c[accept]] = proposal[accept]
            self.paths[c[accept]] = path[accept]
            rejected[pending[~accept]] += 1
            pending = pending[~accept]
        # children still pending keep the parent copy made by resampling
        worst = int(rejected.max()) if len(rejected) else 0
        self.rejections.append(worst)
        return worst


# --------------------------------------------------------------------------
# tempering


@dataclass
class TemperingConfig:
    """Settings for the assimilation step.

    ``enabled=False`` turns the update into plain importance weighting (no
    resampling, tempering or jittering).
    """

    enabled: bool = True
    bisection_tol: float = 1e-4
    tol_ess: float | None = None
    max_temper_iters: int = 200
    jitter_kind: str = "roughening"
    sigma_jit: float = 0.01
    n_jit_modes: int = 50
    rho: float = 0.99
    m_jit: int = 10

    def __post_init__(self):
        if not 0.0 < self.bisection_tol < 1.0:
            raise ValueError("bisection_tol must lie in (0, 1)")
        if self.jitter_kind not in ("roughening", "mcmc", "none"):
            raise ValueError(f"unknown jitter kind {self.jitter_kind!r}")
        if self.m_jit < 1:
            raise ValueError("m_jit must be at least 1")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.max_temper_iters < 1:
            raise ValueError("max_temper_iters must be positive")


@dataclass
class TemperResult:
    iterations: int
    increments: list[float]
    mcmc_iterations: list[int] = field(default_factory=list)
    loglik: np.ndarray | None = None

    @property
    def mean_mcmc_iterations(self) -> float:
        return float(np.mean(self.mcmc_iterations)) if self.mcmc_iterations else 0.0


def temper(
    data: np.ndarray,
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray],
    n_ess: float,
    rng: np.random.Generator,
    config: TemperingConfig,
    jitter: Jitter | None = None,
    log_prior=None,
) -> tuple[np.ndarray, TemperResult]:
    """Tempered resample-and-jitter update of the particles in ``data``.

    ``evaluate(particles, slots)`` returns the log-likelihood of each particle;
    ``slots`` are the ensemble indices the particles occupy. ``log_prior`` are
    the incoming log-weights, used until the first resampling. The remaining
    temperature starts at 1; each pass assimilates a fraction ``delta`` of it.
    """
    jitter = jitter or NoJitter()
    data = np.array(data)
    n = data.shape[0]
    slots = np.arange(n)
    ll = np.asarray(evaluate(data, slots), dtype=float)
    # incoming weights enter untempered and are spent by the first resampling
    base = np.zeros(n) if log_prior is None else np.asarray(log_prior, dtype=float)
    remaining = 1.0
    done = 0.0
    increments: list[float] = []
    mcmc: list[int] = []

    def stage(delta: float) -> None:
        nonlocal data, ll, base
        counts = resample_sus(normalize_weights(base + delta * ll), rng)
        ancestors, children, parents = parent_child_map(counts)
        data = data[ancestors]
        ll = ll[ancestors]
        jitter.reindex(ancestors)
        mcmc.append(jitter(data, children, parents, rng, done + delta, ll, evaluate))
        ll = np.asarray(evaluate(data, slots), dtype=float)
        base = np.zeros(n)

    iterations = 0
    while ess(normalize_weights(base + remaining * ll)) < n_ess:
        if iterations >= config.max_temper_iters:
            raise TemperingError("tempering did not finish", increments)
        delta = find_temperature(
            None, n_ess, remaining, config.bisection_tol, config.tol_ess,
            log_weights=ll, log_base=base,
        )
        stage(delta)
        iterations += 1
        increments.append(delta)
        remaining -= delta
        done += delta
        if remaining <= 1e-12:
            remaining = 0.0
            break

    if remaining > 0.0:
        stage(remaining)
        increments.append(remaining)
    return data, TemperResult(iterations, increments, mcmc, ll)


# --------------------------------------------------------------------------
# global filter step


@dataclass
class Ensemble:
    states: StaggeredState  # leading particle axis
    weights: np.ndarray
    n_ess: float
    rng_streams: list | None = None

    @classmethod
    def uniform(cls, states: StaggeredState, n_ess_fraction: float = 0.8, rng_streams=None):
        n = len(states)
        if not 0.0 < n_ess_fraction <= 1.0:
            raise ValueError("n_ess_fraction must lie in (0, 1]")
        return cls(states, np.full(n, 1.0 / n), n_ess_fraction * n, rng_streams)

    @property
    def size(self) -> int:
        return len(self.weights)


@dataclass
class RegionDiagnostics:
    region: int
    ess: float
    tempering_steps: int
    mcmc_iterations: float = 0.0


@dataclass
class AssimilationDiagnostics:
    k: int
    ess_before: float
    tempering_steps: int = 0
    mcmc_iterations: float = 0.0
    regions: list[RegionDiagnostics] = field(default_factory=list)


def pf_assimilate(
    ensemble: Ensemble,
    batch: ObservationBatch,
    config: TemperingConfig,
    rng: np.random.Generator,
    jitter: Jitter | None = None,
) -> tuple[Ensemble, AssimilationDiagnostics]:
    """One global filter update at an observation time.

    Weights follow ``w_k ~ w_{k-1} g(Y_k | u_k)``. If their ESS drops below the
    threshold (and tempering is enabled) the ensemble is tempered, resampled
    and jittered, and the weights reset to uniform.
    """
    ll = global_log_likelihood(ensemble.states.eta, batch)
    logw = _log(ensemble.weights) + ll
    w = normalize_weights(logw)
    diag = AssimilationDiagnostics(batch.k, ess(w))
    if not config.enabled or len(batch) == 0 or diag.ess_before >= ensemble.n_ess:
        return Ensemble(ensemble.states, w, ensemble.n_ess, ensemble.rng_streams), diag

    def evaluate(particles, slots):
        return global_log_likelihood(particles[..., 2, :, :], batch)

    data, res = temper(
        ensemble.states.data, evaluate, ensemble.n_ess, rng, config, jitter,
        log_prior=_log(ensemble.weights),
    )
    diag.tempering_steps = res.iterations
    diag.mcmc_iterations = res.mean_mcmc_iterations
    n = ensemble.size
    out = Ensemble(StaggeredState(data), np.full(n, 1.0 / n), ensemble.n_ess, ensemble.rng_streams)
    return out, diag
