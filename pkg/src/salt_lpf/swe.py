"""Rotating shallow-water model with transport noise on the C-grid.

Deterministic part::

    du/dt   = -(u.grad)u + (f/Ro) v - (1/Fr^2) d(eta)/dx + nu lap(u)
    dv/dt   = -(u.grad)v - (f/Ro) u - (1/Fr^2) d(eta)/dy + nu lap(v)
    deta/dt = -div(eta u)

The stochastic part transports momentum and height along
``xi = sum_n xi_n dW_n``::

    du   += -[(xi.grad)u + (grad xi)^T u + (f/Ro) z x xi]
    deta += -div(eta xi)

Both are discretised together as transport by ``c = u dt + xi``, see
:func:`_transport`. Time stepping is classical RK4 with the Brownian increment of a step frozen
across all four stages, which is consistent with the Stratonovich form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .grid import ETA, U, V, GridSpec, StaggeredState, fill_ghosts
from .noise import NoiseBasis


class SolverBlowup(RuntimeError):
    def __init__(self, step: int, particles: Sequence[int]):
        self.step = int(step)
        self.particles = [int(p) for p in particles]
        super().__init__(f"non-finite state at step {self.step} in particles {self.particles}")


@dataclass(frozen=True)
class ModelParams:
    Ro: float
    Fr: float
    dt: float
    f: float = 1.0
    nu: float = 1e-5
    name: str = "custom"

    def __post_init__(self):
        if self.Ro <= 0 or self.Fr <= 0 or self.dt <= 0 or self.nu < 0:
            raise ValueError("Ro, Fr, dt must be positive and nu non-negative")

    @classmethod
    def regime(cls, name: str, **overrides) -> "ModelParams":
        key = name.upper()
        if key not in REGIMES:
            raise ValueError(f"unknown regime {name!r}, expected one of {sorted(REGIMES)}")
        return replace(REGIMES[key], **overrides)


REGIMES = {
    "S": ModelParams(Ro=0.9, Fr=0.3, dt=1e-3, name="S"),
    "M": ModelParams(Ro=0.05, Fr=0.05, dt=1e-4, name="M"),
}


# --------------------------------------------------------------------------
# stencils; all inputs are (..., d+2, d+2), outputs cover the interior (..., d, d)
#
# Momentum transport uses the vector-invariant identity
# (c.grad)u + (grad c)^T u = (curl u) z x c + grad(u.c), discretised with the
# energy-conserving C-grid vorticity flux. Vorticity lives on cell corners;
# corner (a, b) is the south-west corner of cell (a, b), a, b = 1..d+1.


def _laplacian(q, dx):
    return (
        q[..., 2:, 1:-1] + q[..., :-2, 1:-1] + q[..., 1:-1, 2:] + q[..., 1:-1, :-2]
        - 4.0 * q[..., 1:-1, 1:-1]
    ) / dx**2


def _face_fluxes(eta, cu, cv):
    """``eta c`` on u- and v-faces; ``fx[i, b]`` is face ``(i+1, b)``, ``fy[a, j]`` is ``(a, j+1)``."""
    fx = 0.5 * (eta[..., :-1, :] + eta[..., 1:, :]) * cu[..., 1:, :]
    fy = 0.5 * (eta[..., :, :-1] + eta[..., :, 1:]) * cv[..., :, 1:]
    return fx, fy


def _flux_divergence(eta, cu, cv, dx):
    """div(eta c) at cell centres, with eta averaged onto the faces."""
    fx, fy = _face_fluxes(eta, cu, cv)
    return (
        fx[..., 1:, 1:-1] - fx[..., :-1, 1:-1] + fy[..., 1:-1, 1:] - fy[..., 1:-1, :-1]
    ) / dx


def _potential_vorticity(u, v, eta, rot, dx):
    """``(rot + curl u) / eta`` on corners; index ``[i, j]`` is corner ``(i+1, j+1)``."""
    zeta = (v[..., 1:, 1:] - v[..., :-1, 1:] - u[..., 1:, 1:] + u[..., 1:, :-1]) / dx
    h = 0.25 * (eta[..., :-1, :-1] + eta[..., 1:, :-1] + eta[..., :-1, 1:] + eta[..., 1:, 1:])
    return (rot + zeta) / h


def _transport(data, cu, cv, wu, wv, rot):
    """Increment from transport by the C-grid velocity ``(cu, cv)``.

    Momentum gets ``-(rot + curl u) z x c - grad K`` with the Bernoulli term
    ``K = avg_x(u wu) + avg_y(v wv)``; height gets ``-div(eta c)``. The map is
    linear in ``(cu, cv, wu, wv)`` jointly.
    """
    d = data.shape[-1] - 2
    dx = 1.0 / d
    u, v, eta = data[..., U, :, :], data[..., V, :, :], data[..., ETA, :, :]
    q = _potential_vorticity(u, v, eta, rot, dx)
    fx, fy = _face_fluxes(eta, cu, cv)
    qv = q * 0.5 * (fy[..., :-1, :] + fy[..., 1:, :])
    qu = q * 0.5 * (fx[..., :, :-1] + fx[..., :, 1:])

    kin = np.zeros(np.broadcast_shapes(u.shape, cu.shape))
    kin[..., 1:-1, 1:-1] = 0.5 * (
        u[..., 1:-1, 1:-1] * wu[..., 1:-1, 1:-1] + u[..., 2:, 1:-1] * wu[..., 2:, 1:-1]
        + v[..., 1:-1, 1:-1] * wv[..., 1:-1, 1:-1] + v[..., 1:-1, 2:] * wv[..., 1:-1, 2:]
    )
    kin[..., 0, :] = kin[..., -2, :]
    kin[..., :, 0] = kin[..., :, 1]

    out = np.zeros(kin.shape[:-2] + (3,) + kin.shape[-2:])
    out[..., U, 1:-1, 1:-1] = (
        0.5 * (qv[..., :-1, :-1] + qv[..., :-1, 1:])
        - (kin[..., 1:-1, 1:-1] - kin[..., :-2, 1:-1]) / dx
    )
    out[..., V, 1:-1, 1:-1] = (
        -0.5 * (qu[..., :-1, :-1] + qu[..., 1:, :-1])
        - (kin[..., 1:-1, 1:-1] - kin[..., 1:-1, :-2]) / dx
    )
    out[..., V, :, 1] = 0.0
    out[..., ETA, 1:-1, 1:-1] = -(
        fx[..., 1:, 1:-1] - fx[..., :-1, 1:-1] + fy[..., 1:-1, 1:] - fy[..., 1:-1, :-1]
    ) / dx
    return out


def deterministic_tendency(data: np.ndarray, params: ModelParams) -> np.ndarray:
    """Right-hand side of the deterministic model; ghost entries are zero."""
    d = data.shape[-1] - 2
    dx = 1.0 / d
    u, v, eta = data[..., U, :, :], data[..., V, :, :], data[..., ETA, :, :]
    g = 1.0 / params.Fr**2
    out = _transport(data, u, v, 0.5 * u, 0.5 * v, params.f / params.Ro)
    out[..., U, 1:-1, 1:-1] += (
        -g * (eta[..., 1:-1, 1:-1] - eta[..., :-2, 1:-1]) / dx + params.nu * _laplacian(u, dx)
    )
    out[..., V, 1:-1, 1:-1] += (
        -g * (eta[..., 1:-1, 1:-1] - eta[..., 1:-1, :-2]) / dx + params.nu * _laplacian(v, dx)
    )
    out[..., V, :, 1] = 0.0
    return out


def stochastic_increment(
    data: np.ndarray, xi_u: np.ndarray, xi_v: np.ndarray, params: ModelParams
) -> np.ndarray:
    """Transport-noise increment for a combined field ``xi`` (already times dW).

    ``xi_u``/``xi_v`` broadcast against the fields of ``data``.
    """
    return _transport(data, xi_u, xi_v, xi_u, xi_v, params.f / params.Ro)


# --------------------------------------------------------------------------
# time stepping


def rk4_integrate(x, rhs: Callable, post: Callable | None = None):
    """One RK4 step ``x -> x + (k1 + 2 k2 + 2 k3 + k4)/6`` where ``rhs(x)`` returns
    the full increment (tendency times dt plus any frozen noise increment).

    ``post`` is applied to every stage input and to the result.
    """
    post = post or (lambda z: z)
    k1 = rhs(x)
    k2 = rhs(post(x + 0.5 * k1))
    k3 = rhs(post(x + 0.5 * k2))
    k4 = rhs(post(x + k3))
    return post(x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0)


def rk4_step(
    data: np.ndarray,
    params: ModelParams,
    xi: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Advance a raw state array by one time step.

    ``xi`` is the combined noise field ``(xi_u, xi_v)`` for this step (modes
    already multiplied by the increments), or None for the deterministic model.
    """
    dt = params.dt

    def rhs(x):
        k = deterministic_tendency(x, params) * dt
        if xi is not None:
            k += stochastic_increment(x, xi[0], xi[1], params)
        return k

    return rk4_integrate(data, rhs, post=fill_ghosts)


def propagate(
    states: StaggeredState,
    params: ModelParams,
    n_steps: int,
    noise: NoiseBasis | None = None,
    rngs: Sequence[np.random.Generator] | None = None,
    increments: np.ndarray | None = None,
    record: bool = False,
    step_offset: int = 0,
    fast: bool = True,
):
    """Advance a (batched) state ``n_steps`` steps.

    Brownian increments come from ``increments`` (shape ``batch + (n_steps,
    n_modes)``) when given, else from one generator per batch member in
    ``rngs``. With ``noise=None`` the deterministic model is integrated.

    Returns the new state, or ``(state, increments)`` when ``record`` is set.
    Raises :class:`SolverBlowup` on the first non-finite value. ``fast``
    selects the compiled kernels; ``fast=False`` runs the numpy stencils.
    """
    data = fill_ghosts(np.array(states.data, dtype=float))
    batch = data.shape[:-3]
    dW = None
    if noise is not None:
        if increments is None:
            if rngs is None:
                raise ValueError("stochastic propagation needs rngs or increments")
            flat = list(rngs)
            if len(flat) != int(np.prod(batch, dtype=int)):
                raise ValueError(f"need {int(np.prod(batch))} generators, got {len(flat)}")
            scale = np.sqrt(params.dt)
            dW = np.stack(
                [g.normal(0.0, scale, size=(n_steps, noise.n_modes)) for g in flat]
            ).reshape(batch + (n_steps, noise.n_modes))
        else:
            dW = np.asarray(increments, dtype=float)
            if dW.shape != batch + (n_steps, noise.n_modes):
                raise ValueError(
                    f"increments shape {dW.shape} != {batch + (n_steps, noise.n_modes)}"
                )

    flat_shape = (-1,) + data.shape[-3:]
    zeros = None
    for s in range(n_steps):
        xi = None
        if dW is not None:
            xi = noise.combine(dW[..., s, :])
        if fast:
            flat = data.reshape(flat_shape)
            if xi is None:
                if zeros is None:
                    zeros = np.zeros((flat.shape[0],) + data.shape[-2:])
                xu = xv = zeros
            else:
                xu = xi[0].reshape((-1,) + data.shape[-2:])
                xv = xi[1].reshape((-1,) + data.shape[-2:])
            data = _kernels.rk4_batch(
                np.ascontiguousarray(flat), xu, xv, xi is not None,
                params.f / params.Ro, 1.0 / params.Fr**2, params.nu, params.dt,
            ).reshape(data.shape)
        else:
            data = rk4_step(data, params, xi)
        if not np.isfinite(data).all():
            bad = ~np.isfinite(data.reshape(batch + (-1,))).all(axis=-1)
            raise SolverBlowup(step_offset + s, np.flatnonzero(bad.ravel()) if batch else [0])

    out = StaggeredState(data)
    if record:
        return out, dW
    return out


def total_mass(state: StaggeredState) -> np.ndarray:
    """Integral of eta over the interior cells."""
    d = state.d
    return state.eta[..., 1:-1, 1:-1].sum(axis=(-2, -1)) / d**2


def energy(state: StaggeredState, params: ModelParams) -> np.ndarray:
    d = state.d
    u = state.u[..., 1:-1, 1:-1]
    v = state.v[..., 1:-1, 1:-1]
    eta = state.eta[..., 1:-1, 1:-1]
    ke = 0.5 * eta * (u**2 + v**2)
    pe = 0.5 * eta**2 / params.Fr**2
    return (ke + pe).sum(axis=(-2, -1)) / d**2
