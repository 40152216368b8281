import numpy as np
import pytest

from salt_lpf.experiment import initial_state
from salt_lpf.grid import GridSpec, StaggeredState, apply_boundary_conditions, fill_ghosts
from salt_lpf.noise import build_noise_basis, xi_mode
from salt_lpf.swe import (
    ModelParams,
    SolverBlowup,
    deterministic_tendency,
    energy,
    propagate,
    rk4_integrate,
    rk4_step,
    stochastic_increment,
    total_mass,
)

S = ModelParams.regime("S")
TWO_PI = 2 * np.pi


def rest_state(d, H=1.0):
    g = GridSpec(d)
    s = g.zeros()
    s.eta[:] = H
    return s


def interior(a):
    return a[..., 1:-1, 1:-1]


def test_regimes():
    assert (S.Ro, S.Fr, S.dt) == (0.9, 0.3, 1e-3)
    m = ModelParams.regime("m")
    assert (m.Ro, m.Fr, m.dt) == (0.05, 0.05, 1e-4)
    assert ModelParams.regime("S", dt=5e-4).dt == 5e-4
    with pytest.raises(ValueError):
        ModelParams.regime("X")
    with pytest.raises(ValueError):
        ModelParams(Ro=1, Fr=1, dt=0)


def test_rest_state_is_fixed_point():
    s = rest_state(16, H=1.3)
    assert np.all(deterministic_tendency(s.data, S) == 0)
    out = propagate(s, S, 5)
    np.testing.assert_array_equal(out.data, s.data)


def _pressure_error(d, eps=1e-2):
    g = GridSpec(d)
    s = rest_state(d)
    xe, _ = g.coords("eta")
    s.eta[:] = 1 + eps * np.sin(TWO_PI * xe)
    s = apply_boundary_conditions(s)
    tend = deterministic_tendency(s.data, ModelParams(Ro=1.0, Fr=0.5, dt=1e-3, nu=0.0))
    xu, _ = g.coords("u")
    exact = -4.0 * eps * TWO_PI * np.cos(TWO_PI * xu)
    assert np.all(interior(tend[1]) == 0)
    return np.max(np.abs(interior(tend[0] - exact)))


def test_pressure_gradient_second_order():
    e1, e2 = _pressure_error(32), _pressure_error(64)
    assert e2 < 1e-3
    assert e1 / e2 == pytest.approx(4.0, rel=0.05)


def test_zero_noise_gives_zero_increment():
    s = initial_state(GridSpec(16), S)
    z = np.zeros((18, 18))
    assert np.all(stochastic_increment(s.data, z, z, S) == 0)


def _noise_fields(d, coeffs=(0.4, 0.9, 0.3, 0.7), n=2):
    g = GridSpec(d)
    xu = xi_mode(*g.coords("u"), n, coeffs, 0.1, 2)[0]
    xv = xi_mode(*g.coords("v"), n, coeffs, 0.1, 2)[1]
    return g, xu, xv


def _noise_errors(d, H=1.5):
    """Errors of the stochastic increment on a state at rest against its analytic limit."""
    g, xu, xv = _noise_fields(d)
    s = rest_state(d, H)
    inc = stochastic_increment(s.data, xu, xv, S)
    rot = S.f / S.Ro
    c = (0.4, 0.9, 0.3, 0.7)
    amp = 0.1 / 4
    k = TWO_PI * 2

    x, y = g.coords("eta")
    div = amp * k * (
        np.cos(k * y) * (c[0] * np.cos(k * x) - c[1] * np.sin(k * x))
        + np.cos(k * y) * (c[2] * np.sin(k * x) + c[3] * np.cos(k * x))
    )
    e_eta = np.max(np.abs(interior(inc[2] + H * div)))

    # momentum of a fluid at rest only sees -rot z x xi
    x, y = g.coords("u")
    e_u = np.max(np.abs(interior(inc[0] - rot * xi_mode(x, y, 2, c, 0.1, 2)[1])))
    x, y = g.coords("v")
    e_v = np.max(np.abs(interior(inc[1] + rot * xi_mode(x, y, 2, c, 0.1, 2)[0])[:, 1:]))
    return e_eta, e_u, e_v


def test_noise_height_and_coriolis_terms():
    coarse = np.array(_noise_errors(32))
    fine = np.array(_noise_errors(64))
    assert np.all(fine < 2e-3)
    np.testing.assert_allclose(coarse / fine, 4.0, rtol=0.1)


def test_divergence_free_noise_keeps_flat_height():
    # xi = (-dpsi/dy, dpsi/dx) with psi on corners is discretely divergence free
    d = 16
    g = GridSpec(d)
    xc = (np.arange(d + 2) - 1) / d
    psi = np.sin(TWO_PI * xc)[:, None] * np.sin(np.pi * xc)[None, :] ** 2
    xu = np.zeros((d + 2, d + 2))
    xv = np.zeros_like(xu)
    xu[:, :-1] = -(psi[:, 1:] - psi[:, :-1]) * d
    xv[:-1, :] = (psi[1:, :] - psi[:-1, :]) * d
    s = rest_state(d, 2.0)
    inc = stochastic_increment(s.data, xu, xv, S)
    assert np.max(np.abs(interior(inc[2]))) < 1e-12


def test_numba_matches_numpy():
    g = GridSpec(24)
    s0 = initial_state(g, S)
    basis = build_noise_basis(g, rng=np.random.default_rng(0))
    batch = StaggeredState.stack([s0, s0])
    dW = np.random.default_rng(1).normal(0, np.sqrt(S.dt), size=(2, 20, 25))
    fast = propagate(batch, S, 20, basis, increments=dW)
    slow = propagate(batch, S, 20, basis, increments=dW, fast=False)
    np.testing.assert_allclose(fast.data, slow.data, rtol=0, atol=1e-12)
    det_fast = propagate(s0, S, 10)
    det_slow = propagate(s0, S, 10, fast=False)
    np.testing.assert_allclose(det_fast.data, det_slow.data, rtol=0, atol=1e-12)


def test_mass_conserved():
    g = GridSpec(64)
    s0 = initial_state(g, S)
    basis = build_noise_basis(g, rng=np.random.default_rng(2))
    out = propagate(s0, S, 100, basis, rngs=[np.random.default_rng(3)])
    assert abs(total_mass(out) - total_mass(s0)) <= 1e-6


def test_energy_nearly_conserved_without_viscosity():
    params = ModelParams.regime("S", nu=0.0)
    s0 = initial_state(GridSpec(32), params)
    out = propagate(s0, params, 100)
    e0, e1 = energy(s0, params), energy(out, params)
    # the diagnostic is not the exact discrete invariant, so allow a small drift
    assert abs(e1 - e0) / e0 < 1e-5


def test_rk4_local_error_order():
    lam = -1.3

    def step_error(h):
        x = rk4_integrate(np.array([1.0]), lambda z: lam * h * z)
        return abs(x[0] - np.exp(lam * h))

    assert step_error(0.1) / step_error(0.05) == pytest.approx(32.0, rel=0.05)


def test_time_step_convergence_fourth_order():
    g = GridSpec(16)
    base = ModelParams.regime("S", dt=0.01)
    s0 = initial_state(g, base)
    T = 0.16
    sols = []
    for m in (1, 2, 4):
        p = ModelParams.regime("S", dt=base.dt / m)
        sols.append(propagate(s0, p, int(round(T / p.dt))).data)
    ratio = np.max(np.abs(sols[0] - sols[1])) / np.max(np.abs(sols[1] - sols[2]))
    assert ratio == pytest.approx(16.0, rel=0.15)


def test_blowup_reports_step_and_particles():
    g = GridSpec(8)
    s0 = initial_state(g, S)
    batch = StaggeredState.stack([s0, s0, s0])
    batch.data[1, 2, 4, 4] = np.nan
    with pytest.raises(SolverBlowup) as info:
        propagate(batch, S, 3, step_offset=40)
    assert info.value.step == 40
    assert info.value.particles == [1]


def test_stochastic_propagation_is_deterministic_given_streams():
    g = GridSpec(16)
    s0 = initial_state(g, S)
    basis = build_noise_basis(g, rng=np.random.default_rng(4))
    a, dW = propagate(s0, S, 10, basis, rngs=[np.random.default_rng(5)], record=True)
    b = propagate(s0, S, 10, basis, rngs=[np.random.default_rng(5)])
    c = propagate(s0, S, 10, basis, increments=dW)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.data, c.data)
    with pytest.raises(ValueError):
        propagate(s0, S, 10, basis)


def test_zero_steps_is_identity():
    s0 = initial_state(GridSpec(16), S)
    np.testing.assert_array_equal(propagate(s0, S, 0).data, s0.data)


def test_boundary_conditions_hold_after_step():
    g = GridSpec(16)
    s0 = initial_state(g, S)
    basis = build_noise_basis(g, rng=np.random.default_rng(6))
    xi = basis.combine(np.random.default_rng(7).normal(0, 0.03, 25))
    out = rk4_step(s0.data, S, xi)
    np.testing.assert_array_equal(out, fill_ghosts(out.copy()))
    assert np.all(out[1, :, 1] == 0)
