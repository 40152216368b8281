"""Observation layouts, synthetic data and the Gaussian height likelihood.

Locations are interior grid indices ``(x_index, y_index)`` of height points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridSpec

# strip x positions on the reference 128 grid, cycled through in this order
DEFAULT_STRIP_POSITIONS = (10, 90, 40, 120, 70, 20, 100, 50)
REFERENCE_D = 128


def fixed_grid_locations(d: int, d_obs: int) -> np.ndarray:
    """``d_obs x d_obs`` regularly spaced points; index ``floor((k + 0.5) d / d_obs)``."""
    if not 1 <= d_obs <= d:
        raise ValueError(f"d_obs must be in [1, {d}], got {d_obs}")
    idx = np.floor((np.arange(d_obs) + 0.5) * d / d_obs).astype(int)
    ix, iy = np.meshgrid(idx, idx, indexing="ij")
    return np.column_stack([ix.ravel(), iy.ravel()])


def scaled_strip_positions(d: int, positions=DEFAULT_STRIP_POSITIONS) -> tuple[int, ...]:
    return tuple(int(round(p * d / REFERENCE_D)) % d for p in positions)


def strip_locations(d: int, x: int, width: int = 2) -> np.ndarray:
    """All heights in columns ``x .. x + width - 1`` (wrapped EW)."""
    cols = (x + np.arange(width)) % d
    ix, iy = np.meshgrid(cols, np.arange(d), indexing="ij")
    return np.column_stack([ix.ravel(), iy.ravel()])


@dataclass(frozen=True)
class ObservationSchedule:
    """Where and how often heights are observed.

    ``kind`` is ``"fixed_grid"`` (``d_obs`` points per axis) or
    ``"moving_strip"`` (a ``width``-column strip that steps through
    ``positions``, already in grid units). ``r`` is the number of model steps
    between assimilation times.
    """

    kind: str
    r: int = 10
    sigma_obs: float = 0.01
    d_obs: int | None = None
    width: int = 2
    positions: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in ("fixed_grid", "moving_strip"):
            raise ValueError(f"unknown observation layout {self.kind!r}")
        if self.r < 1:
            raise ValueError("r must be a positive number of steps")
        if self.sigma_obs <= 0:
            raise ValueError("sigma_obs must be positive")
        if self.kind == "fixed_grid" and self.d_obs is None:
            raise ValueError("fixed_grid layout needs d_obs")
        if self.kind == "moving_strip" and self.width < 1:
            raise ValueError("strip width must be positive")

    def locations_at(self, k: int, grid: GridSpec) -> np.ndarray:
        """Locations observed at assimilation time ``k`` (1-based)."""
        if self.kind == "fixed_grid":
            return fixed_grid_locations(grid.d, self.d_obs)
        positions = self.positions or scaled_strip_positions(grid.d)
        x = positions[(k - 1) % len(positions)]
        return strip_locations(grid.d, x, self.width)


@dataclass
class ObservationBatch:
    k: int
    locations: np.ndarray  # (n_obs, 2) int
    values: np.ndarray  # (n_obs,)
    sigma_obs: float | np.ndarray

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=int).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(self.values) != len(self.locations):
            raise ValueError("locations and values differ in length")
        sig = np.asarray(self.sigma_obs, dtype=float)
        if np.any(sig <= 0):
            raise ValueError("observation error must be positive")

    def __len__(self) -> int:
        return len(self.values)

    def subset(self, mask) -> "ObservationBatch":
        sig = np.asarray(self.sigma_obs, dtype=float)
        sig = sig[mask] if sig.ndim else float(sig)
        return ObservationBatch(self.k, self.locations[mask], self.values[mask], sig)


def eta_at(eta: np.ndarray, locations: np.ndarray) -> np.ndarray:
    """Heights of ghosted field(s) ``(..., d+2, d+2)`` at interior ``locations``."""
    loc = np.asarray(locations, dtype=int)
    return eta[..., loc[:, 0] + 1, loc[:, 1] + 1]


def synthesize(
    signal_eta: np.ndarray,
    locations: np.ndarray,
    sigma_obs: float,
    rng: np.random.Generator,
    k: int = 0,
) -> ObservationBatch:
    """Noisy observations of the signal height field."""
    clean = eta_at(signal_eta, locations)
    return ObservationBatch(k, locations, clean + rng.normal(0.0, sigma_obs, clean.shape), sigma_obs)


def log_likelihood(predicted: np.ndarray, batch: ObservationBatch, weights=None) -> np.ndarray:
    """``-sum (y - h)^2 / (2 sigma^2)`` over the last axis, constants dropped.

    ``weights`` optionally scales each observation's term.
    """
    r = (batch.values - predicted) / batch.sigma_obs
    sq = r * r if weights is None else (weights * r) * r
    return -0.5 * np.sum(sq, axis=-1)


def global_log_likelihood(eta: np.ndarray, batch: ObservationBatch) -> np.ndarray:
    """Log-likelihood per particle of ghosted height fields ``(..., d+2, d+2)``."""
    if len(batch) == 0:
        return np.zeros(eta.shape[:-2])
    return log_likelihood(eta_at(eta, batch.locations), batch)


CSV_HEADER = ("k", "x_index", "y_index", "value")


def write_batches(path, batches) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for b in batches:
            for (ix, iy), val in zip(b.locations, b.values):
                w.writerow([b.k, int(ix), int(iy), repr(float(val))])


def read_batches(path, sigma_obs: float) -> list[ObservationBatch]:
    rows: dict[int, list] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            rows.setdefault(int(row["k"]), []).append(
                (int(row["x_index"]), int(row["y_index"]), float(row["value"]))
            )
    out = []
    for k in sorted(rows):
        arr = np.array(rows[k])
        out.append(ObservationBatch(k, arr[:, :2].astype(int), arr[:, 2], sigma_obs))
    return out
