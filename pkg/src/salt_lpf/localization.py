"""Localized particle filter: damped local likelihoods, per-region tempering and merging.

Each subregion tempers its own block of every particle. Observations outside
the region enter its likelihood through a frozen snapshot of the blocks taken
before any local update, damped with ``exp(-alpha * distance)``. Afterwards the
blocks are stitched back into global particles, blending linearly across the
overlap strips.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .filtering import (
    AssimilationDiagnostics,
    Ensemble,
    Jitter,
    RegionDiagnostics,
    TemperingConfig,
    _log,
    ess,
    normalize_weights,
    temper,
)
from .grid import (
    Decomposition,
    GridSpec,
    Rect,
    StaggeredState,
    build_decomposition,
    fill_ghosts,
    region_distance,
    restrict_array,
)
from .observations import ObservationBatch, global_log_likelihood, log_likelihood


@dataclass(frozen=True)
class LocalizationConfig:
    n_loc: int = 4
    alpha: float = 500.0
    overlap_halfwidth: int = 6
    wrap_ew: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def decomposition(self, grid: GridSpec) -> Decomposition:
        return build_decomposition(grid, self.n_loc, self.overlap_halfwidth, self.wrap_ew)


def gaspari_cohn(box: Rect, z, alpha: float, grid: GridSpec, wrap_ew: bool = True):
    """1 inside ``box``, ``exp(-alpha * distance)`` outside."""
    dist = np.asarray(region_distance(box, z, grid, wrap_ew))
    rho = np.where(dist == 0.0, 1.0, np.exp(-alpha * dist))
    return float(rho) if rho.ndim == 0 else rho


def observation_membership(decomp: Decomposition, locations) -> np.ndarray:
    """Boolean ``(n_loc, n_obs)``: which region boxes contain each location."""
    loc = np.asarray(locations, dtype=int).reshape(-1, 2)
    d = decomp.grid.d
    return np.array(
        [np.asarray(b.contains(loc[:, 0], loc[:, 1], d, decomp.wrap_ew), dtype=bool).reshape(-1)
         for b in decomp.boxes]
    ).reshape(len(decomp.boxes), len(loc))


def assign_region(membership: np.ndarray, j: int) -> np.ndarray:
    """Region whose block supplies each observation for region ``j``.

    ``j`` itself when the location lies in its box, otherwise the smallest
    region index containing it.
    """
    membership = np.asarray(membership, dtype=bool)
    covered = membership.any(axis=0)
    if not covered.all():
        raise ValueError(f"observations {np.flatnonzero(~covered).tolist()} lie in no region")
    return np.where(membership[j], j, np.argmax(membership, axis=0))


def _block_coords(box: Rect, locations: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    return (locations[:, 0] - box.x0) % d, locations[:, 1] - box.y0


class RegionLikelihood:
    """Local log-likelihood of region ``j`` with frozen external blocks.

    Calling it with the region's current blocks and their ensemble slots gives
    ``-1/2 sum_s rho_s (Y_s - eta(z_s))^2 / sigma^2`` where ``eta`` is read from
    the region's own block for its observations and from the frozen block of
    the assigned region for the rest.
    """

    def __init__(
        self,
        j: int,
        decomp: Decomposition,
        batch: ObservationBatch,
        frozen: Sequence[np.ndarray],
        alpha: float,
        membership: np.ndarray | None = None,
    ):
        d = decomp.grid.d
        self.batch = batch
        loc = batch.locations
        membership = observation_membership(decomp, loc) if membership is None else membership
        source = assign_region(membership, j)
        self.own = np.flatnonzero(source == j)
        self.own_xy = _block_coords(decomp.boxes[j], loc[self.own], d)
        self.rho = gaspari_cohn(decomp.boxes[j], (loc[:, 0], loc[:, 1]), alpha, decomp.grid, decomp.wrap_ew)
        self.rho = np.atleast_1d(self.rho)
        ext = np.flatnonzero(source != j)
        n = frozen[0].shape[0]
        self.template = np.zeros((n, len(loc)))
        for l in np.unique(source[ext]):
            cols = ext[source[ext] == l]
            bx, by = _block_coords(decomp.boxes[l], loc[cols], d)
            self.template[:, cols] = frozen[l][:, 2, bx, by]
        self.all_ones = bool(np.all(self.rho == 1.0))

    def predicted(self, blocks: np.ndarray, slots) -> np.ndarray:
        pred = self.template[slots].copy()
        pred[:, self.own] = blocks[:, 2, self.own_xy[0], self.own_xy[1]]
        return pred

    def __call__(self, blocks: np.ndarray, slots) -> np.ndarray:
        return log_likelihood(self.predicted(blocks, slots), self.batch,
                              None if self.all_ones else self.rho)


def local_log_likelihood(
    j: int, blocks: Sequence[np.ndarray], batch: ObservationBatch, decomp: Decomposition, alpha: float
) -> np.ndarray:
    """Local log-likelihood of every particle for region ``j`` before any local update."""
    if len(batch) == 0:
        return np.zeros(blocks[j].shape[0])
    lik = RegionLikelihood(j, decomp, batch, blocks, alpha)
    return lik(blocks[j], np.arange(blocks[j].shape[0]))


def local_weights(
    j: int,
    blocks: Sequence[np.ndarray],
    batch: ObservationBatch,
    decomp: Decomposition,
    alpha: float,
    prior_weights=None,
) -> np.ndarray:
    lp = 0.0 if prior_weights is None else _log(prior_weights)
    return normalize_weights(lp + local_log_likelihood(j, blocks, batch, decomp, alpha))


# --------------------------------------------------------------------------
# merging


def interp_ew(west: np.ndarray, east: np.ndarray) -> np.ndarray:
    """Linear blend along x (axis -2): ``west`` at the first column, ``east`` at the last."""
    n = west.shape[-2]
    if n < 2:
        raise ValueError("interpolation needs at least two columns")
    t = (np.arange(n) / (n - 1))[:, None]
    # written so that equal inputs come back unchanged bit for bit
    return west + t * (east - west)


def interp_sn(south: np.ndarray, north: np.ndarray) -> np.ndarray:
    """Linear blend along y (axis -1): ``south`` at the first row, ``north`` at the last."""
    n = south.shape[-1]
    if n < 2:
        raise ValueError("interpolation needs at least two rows")
    t = np.arange(n) / (n - 1)
    return south + t * (north - south)


def _piece(block: np.ndarray, box: Rect, rect: Rect, d: int) -> np.ndarray:
    ox = (rect.x0 - box.x0) % d
    oy = rect.y0 - box.y0
    return block[..., ox:ox + rect.nx, oy:oy + rect.ny]


def merge_global(blocks: Sequence[np.ndarray], decomp: Decomposition) -> StaggeredState:
    """Rebuild ghosted global particles from per-region blocks ``(..., 3, nx_j, ny_j)``."""
    if len(blocks) != decomp.n_loc:
        raise ValueError(f"expected {decomp.n_loc} blocks, got {len(blocks)}")
    d = decomp.grid.d
    boxes = decomp.boxes
    lead = blocks[0].shape[:-2]
    out = np.zeros(lead + (d + 2, d + 2))

    def put(rect: Rect, values: np.ndarray) -> None:
        xi = rect.x_indices(d) + 1
        yi = rect.y_indices() + 1
        out[..., xi[:, None], yi[None, :]] = values

    def piece(j: int, rect: Rect) -> np.ndarray:
        return _piece(blocks[j], boxes[j], rect, d)

    for j, core in enumerate(decomp.cores):
        if core.nx > 0 and core.ny > 0:
            put(core, piece(j, core))
    for ov in decomp.ew_overlaps:
        w, e = ov.owners
        put(ov.rect, interp_ew(piece(w, ov.rect), piece(e, ov.rect)))
    for ov in decomp.sn_overlaps:
        s, n = ov.owners
        put(ov.rect, interp_sn(piece(s, ov.rect), piece(n, ov.rect)))
    for ov in decomp.corner_overlaps:
        sw, se, nw, ne = ov.owners
        r = ov.rect
        put(r, interp_sn(interp_ew(piece(sw, r), piece(se, r)), interp_ew(piece(nw, r), piece(ne, r))))
    return StaggeredState(fill_ghosts(out))


# --------------------------------------------------------------------------
# assimilation


def lpf_assimilate(
    ensemble: Ensemble,
    batch: ObservationBatch,
    loc: LocalizationConfig,
    config: TemperingConfig,
    region_rng: Callable[[int], np.random.Generator],
    region_jitter: Callable[[int, Rect], Jitter] | None = None,
    decomp: Decomposition | None = None,
    executor: Executor | None = None,
) -> tuple[Ensemble, AssimilationDiagnostics]:
    """One localized filter update.

    ``region_rng(j)`` and ``region_jitter(j, box)`` supply the random stream
    and the jitter of region ``j``; building them per region keeps the result
    independent of the order (or concurrency) in which regions run.
    """
    grid = GridSpec(ensemble.states.d)
    decomp = decomp or loc.decomposition(grid)
    n = ensemble.size
    log_prior = _log(ensemble.weights)
    ll = global_log_likelihood(ensemble.states.eta, batch)
    w = normalize_weights(log_prior + ll)
    diag = AssimilationDiagnostics(batch.k, ess(w))
    if not config.enabled or len(batch) == 0 or diag.ess_before >= ensemble.n_ess:
        return Ensemble(ensemble.states, w, ensemble.n_ess, ensemble.rng_streams), diag

    d = grid.d
    data = ensemble.states.data
    frozen = [restrict_array(data, box, d) for box in decomp.boxes]
    for f in frozen:
        f.flags.writeable = False
    membership = observation_membership(decomp, batch.locations)

    def run_region(j: int):
        lik = RegionLikelihood(j, decomp, batch, frozen, loc.alpha, membership)
        wj = normalize_weights(log_prior + lik(frozen[j], np.arange(n)))
        ess_j = ess(wj)
        # weights reset to uniform afterwards, so every region resamples once
        jitter = region_jitter(j, decomp.boxes[j]) if region_jitter else None
        block, res = temper(frozen[j], lik, ensemble.n_ess, region_rng(j), config, jitter, log_prior)
        return block, RegionDiagnostics(j, ess_j, res.iterations, res.mean_mcmc_iterations)

    if executor is None:
        results = [run_region(j) for j in range(decomp.n_loc)]
    else:
        results = list(executor.map(run_region, range(decomp.n_loc)))

    merged = merge_global([b for b, _ in results], decomp)
    diag.regions = [r for _, r in results]
    diag.tempering_steps = int(sum(r.tempering_steps for r in diag.regions))
    diag.mcmc_iterations = float(np.mean([r.mcmc_iterations for r in diag.regions]))
    return Ensemble(merged, np.full(n, 1.0 / n), ensemble.n_ess, ensemble.rng_streams), diag
