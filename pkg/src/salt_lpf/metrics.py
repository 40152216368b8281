"""Ensemble error metrics against the signal.

EMRE, RB and RES are relative L2 errors over whole fields; RMSE and CRPS are
evaluated at observation points. Field arguments are plain arrays whose last
two axes are the (interior) grid; the discrete L2 norm weights every point by
``dx^2`` with ``dx = 1 / n``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .grid import FIELD_NAMES, StaggeredState
from .observations import eta_at


def l2_norm(f: np.ndarray) -> np.ndarray:
    n = f.shape[-1]
    return np.sqrt(np.sum(f * f, axis=(-2, -1)) / n**2)


def _signal_norm(signal) -> float:
    norm = float(l2_norm(np.asarray(signal, dtype=float)))
    if norm == 0.0:
        raise ValueError("signal has zero L2 norm")
    return norm


def emre(signal, ensemble) -> float:
    """Mean over members of ``||f - f_i|| / ||f||``."""
    ens = np.asarray(ensemble, dtype=float)
    return float(np.mean(l2_norm(signal - ens)) / _signal_norm(signal))


def rb(signal, ensemble) -> float:
    """``||f - mean_i f_i|| / ||f||``."""
    ens = np.asarray(ensemble, dtype=float)
    return float(l2_norm(signal - ens.mean(axis=0)) / _signal_norm(signal))


def res(signal, ensemble) -> float:
    """``sum_i ||f_i - mean|| / ((N - 1) ||f||)``."""
    ens = np.asarray(ensemble, dtype=float)
    if ens.shape[0] < 2:
        raise ValueError("spread needs at least two members")
    spread = l2_norm(ens - ens.mean(axis=0))
    return float(np.sum(spread) / (ens.shape[0] - 1) / _signal_norm(signal))


def rmse_obs(truth, members) -> float:
    """``truth`` ``(n_loc,)`` and ``members`` ``(N, n_loc)`` at observation points."""
    truth = np.asarray(truth, dtype=float)
    members = np.asarray(members, dtype=float)
    if truth.size == 0:
        raise ValueError("no observation locations")
    return float(np.mean(np.sqrt(np.mean((members - truth) ** 2, axis=0))))


def crps_obs(truth, members) -> float:
    """Mean over locations of ``E|X - y| - E|X - X'| / 2`` for the empirical ensemble CDF.

    This equals the integral of the squared difference between the ensemble
    CDF and the step function at the truth.
    """
    truth = np.asarray(truth, dtype=float)
    members = np.asarray(members, dtype=float)
    if truth.size == 0:
        raise ValueError("no observation locations")
    n = members.shape[0]
    skill = np.mean(np.abs(members - truth), axis=0)
    # sum_ij |x_i - x_j| via sorted members: sum_i (2i - n + 1) x_(i)
    xs = np.sort(members, axis=0)
    coef = (2 * np.arange(n) - n + 1)[:, None]
    pair = 2.0 * np.sum(coef * xs, axis=0)
    return float(np.mean(skill - pair / (2.0 * n * n)))


@dataclass
class MetricRecord:
    k: int
    step: int
    emre_u: float
    rb_u: float
    res_u: float
    emre_v: float
    rb_v: float
    res_v: float
    emre_eta: float
    rb_eta: float
    res_eta: float
    rmse_eta: float
    crps_eta: float


METRIC_FIELDS = tuple(MetricRecord.__dataclass_fields__)


def compute_metrics(k: int, step: int, signal: StaggeredState, ensemble: StaggeredState, locations) -> MetricRecord:
    """All metrics for one time; states are ghosted, norms use the interior only."""
    sig = signal.interior()
    ens = ensemble.interior()
    vals = {}
    for f, name in enumerate(FIELD_NAMES):
        vals[f"emre_{name}"] = emre(sig[f], ens[:, f])
        vals[f"rb_{name}"] = rb(sig[f], ens[:, f])
        vals[f"res_{name}"] = res(sig[f], ens[:, f])
    truth = eta_at(signal.eta, locations)
    members = eta_at(ensemble.eta, locations)
    return MetricRecord(k, step, rmse_eta=rmse_obs(truth, members), crps_eta=crps_obs(truth, members), **vals)


def write_metrics(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in records:
            row = asdict(r)
            w.writerow([row[f] if f in ("k", "step") else repr(float(row[f])) for f in METRIC_FIELDS])


def read_metrics(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header")
        return [
            MetricRecord(**{f: int(row[f]) if f in ("k", "step") else float(row[f]) for f in METRIC_FIELDS})
            for row in reader
        ]
