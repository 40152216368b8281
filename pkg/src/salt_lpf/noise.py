"""Transport-noise basis, jittering basis and Brownian increments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, Rect, fill_ghosts, restrict_array

TWO_PI = 2.0 * np.pi


def xi_mode(x, y, n: int, coeffs, sigma_noise: float = 0.1, p: float = 2.0):
    """Analytic transport-noise mode ``n`` (1-based) at physical points (x, y).

    ``coeffs`` are ``(alpha, beta, gamma, delta)``.
    """
    a, b, g, dl = coeffs
    amp = sigma_noise / n**p
    sx, cx = np.sin(TWO_PI * n * x), np.cos(TWO_PI * n * x)
    xu = amp * np.cos(TWO_PI * n * y) * (a * sx + b * cx)
    xv = amp * np.sin(TWO_PI * n * y) * (g * sx + dl * cx)
    return xu, xv


@dataclass(frozen=True)
class NoiseBasis:
    grid: GridSpec
    n_modes: int
    p: float
    sigma_noise: float
    coeffs: np.ndarray  # (n_modes, 4)
    xi_u: np.ndarray  # (n_modes, d+2, d+2) at u-points
    xi_v: np.ndarray  # (n_modes, d+2, d+2) at v-points

    def combine(self, dW: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sum of modes weighted by increments; ``dW`` is ``(..., n_modes)``."""
        dW = np.asarray(dW, dtype=float)
        if dW.shape[-1] != self.n_modes:
            raise ValueError(f"expected {self.n_modes} increments, got {dW.shape[-1]}")
        return (
            np.tensordot(dW, self.xi_u, axes=(-1, 0)),
            np.tensordot(dW, self.xi_v, axes=(-1, 0)),
        )


def build_noise_basis(
    grid: GridSpec,
    n_modes: int = 25,
    p: float = 2.0,
    sigma_noise: float = 0.1,
    rng: np.random.Generator | None = None,
    coeffs=None,
) -> NoiseBasis:
    """Evaluate the transport-noise modes on the staggered grid.

    Coefficients are drawn Uniform(0, 1) from ``rng`` unless given explicitly.
    """
    if n_modes < 1:
        raise ValueError("need at least one noise mode")
    if coeffs is None:
        rng = np.random.default_rng() if rng is None else rng
        coeffs = rng.uniform(0.0, 1.0, size=(n_modes, 4))
    coeffs = np.asarray(coeffs, dtype=float).reshape(n_modes, 4)
    xu_pts = grid.coords("u")
    xv_pts = grid.coords("v")
    xi_u = np.empty((n_modes, grid.extent, grid.extent))
    xi_v = np.empty_like(xi_u)
    for k in range(n_modes):
        xi_u[k] = xi_mode(*xu_pts, k + 1, coeffs[k], sigma_noise, p)[0]
        xi_v[k] = xi_mode(*xv_pts, k + 1, coeffs[k], sigma_noise, p)[1]
    return NoiseBasis(grid, n_modes, p, sigma_noise, coeffs, xi_u, xi_v)


def quad_variation_rate(basis: NoiseBasis) -> float:
    """Coefficient of t in the L2 quadratic variation of the driving noise."""
    n = np.arange(1, basis.n_modes + 1, dtype=float)
    return float(
        basis.sigma_noise**2 / 4.0 * np.sum(np.sum(basis.coeffs**2, axis=1) / n ** (2 * basis.p))
    )


def calibrate_sigma_noise(
    mean_speed: float, p: float = 2.0, n_modes: int = 25, target_fraction: float = 0.1
) -> float:
    """Noise amplitude whose expected L2 magnitude is ``target_fraction * mean_speed``.

    Uses E[U^2] = 1/3 for the Uniform(0, 1) mode coefficients.
    """
    if mean_speed <= 0 or p <= 0 or n_modes < 1 or target_fraction < 0:
        raise ValueError("mean_speed, p, n_modes must be positive and target_fraction >= 0")
    n = np.arange(1, n_modes + 1, dtype=float)
    return float(target_fraction * mean_speed * np.sqrt(3.0) / np.sqrt(np.sum(n ** (-2 * p))))


def brownian_increments(rng: np.random.Generator, n_modes: int, dt: float, size=()) -> np.ndarray:
    shape = (size,) if isinstance(size, int) else tuple(size)
    return rng.normal(0.0, np.sqrt(dt), size=shape + (n_modes,))


# --------------------------------------------------------------------------
# jittering


def zeta_mode(x, y, n: int):
    """Jitter mode ``n`` as written: (zeta_u, zeta_v, zeta_eta).

    The u and v components are identical in the source formula; kept as is.
    """
    sx = np.sin(TWO_PI * n * x) + np.cos(TWO_PI * n * x)
    zu = (np.cos(TWO_PI * n * y) + np.sin(TWO_PI * n * y + np.pi / 2)) * sx
    ze = (np.sin(TWO_PI * n * y) - np.cos(TWO_PI * n * y + np.pi / 2)) * sx
    return zu, zu.copy(), ze


@dataclass(frozen=True)
class JitterBasis:
    """Smooth perturbation basis; ``modes`` already carry the 1/n^2 decay.

    ``modes`` has shape ``(n_modes, 3, nx, ny)``: the full ghosted grid for a
    basis from :func:`build_jitter_basis`, or a block after :meth:`restrict`.
    """

    n_modes: int
    sigma_jit: float
    modes: np.ndarray

    def restrict(self, box: Rect, d: int) -> "JitterBasis":
        return JitterBasis(self.n_modes, self.sigma_jit, restrict_array(self.modes, box, d))

    def interior(self) -> "JitterBasis":
        return JitterBasis(self.n_modes, self.sigma_jit, self.modes[..., 1:-1, 1:-1].copy())


def build_jitter_basis(grid: GridSpec, n_modes: int = 50, sigma_jit: float = 0.01) -> JitterBasis:
    """Evaluate the jitter modes at each field's staggered points.

    Each mode is then passed through the model boundary conditions, which
    zeroes the v component on the SN walls and fills ghost cells.
    """
    pts = [grid.coords(k) for k in ("u", "v", "eta")]
    modes = np.empty((n_modes, 3, grid.extent, grid.extent))
    for k in range(n_modes):
        n = k + 1
        for f in range(3):
            modes[k, f] = zeta_mode(*pts[f], n)[f] / n**2
    fill_ghosts(modes)
    return JitterBasis(n_modes, float(sigma_jit), modes)


def sample_jitter_field(basis: JitterBasis, rng: np.random.Generator, size=()) -> np.ndarray:
    """``sigma_jit * sum_n zeta_n / n^2 * Z_n`` with ``Z_n`` iid N(0, 1).

    ``size`` prepends sample axes; output is ``size + basis.modes.shape[1:]``.
    """
    shape = (size,) if isinstance(size, int) else tuple(size)
    z = rng.standard_normal(shape + (basis.n_modes,))
    return basis.sigma_jit * np.tensordot(z, basis.modes, axes=(-1, 0))
