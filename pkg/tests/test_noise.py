import numpy as np
import pytest

from salt_lpf.grid import GridSpec, Rect
from salt_lpf.noise import (
    brownian_increments,
    build_jitter_basis,
    build_noise_basis,
    calibrate_sigma_noise,
    quad_variation_rate,
    sample_jitter_field,
    xi_mode,
    zeta_mode,
)

# sigma^2 * sum_{n<=25} n^-4 for unit coefficients, sigma = 0.1
QV_UNIT_RATE = 0.010823031462717202
# 0.1 * 0.7 * sqrt(3) / sqrt(sum_{n<=25} n^-4)
CALIBRATED_07 = 0.11654246694474621


def test_xi_mode_example():
    xu, xv = xi_mode(0.25, 0.0, 1, (1.0, 0.0, 0.0, 0.0), sigma_noise=0.1, p=2)
    assert xu == pytest.approx(0.1)
    assert xv == pytest.approx(0.0)


def test_xi_v_vanishes_on_walls():
    x = np.linspace(0, 1, 37)
    for n in (1, 4, 13):
        for y in (0.0, 1.0):
            _, xv = xi_mode(x, y, n, (0.3, 0.7, 0.9, 0.2))
            assert np.max(np.abs(xv)) < 1e-12


def test_xi_periodic_in_x():
    y = np.linspace(0, 1, 11)
    a = xi_mode(0.3, y, 3, (0.1, 0.2, 0.3, 0.4))
    b = xi_mode(1.3, y, 3, (0.1, 0.2, 0.3, 0.4))
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_basis_on_grid_respects_boundaries():
    g = GridSpec(32)
    basis = build_noise_basis(g, rng=np.random.default_rng(0))
    assert basis.xi_u.shape == (25, 34, 34)
    assert np.max(np.abs(basis.xi_v[:, :, 1])) < 1e-12
    assert np.max(np.abs(basis.xi_v[:, :, g.d + 1])) < 1e-12
    # ghost columns are periodic images
    np.testing.assert_allclose(basis.xi_u[:, 0], basis.xi_u[:, g.d], atol=1e-12)
    np.testing.assert_allclose(basis.xi_v[:, g.d + 1], basis.xi_v[:, 1], atol=1e-12)


def test_combine_is_linear():
    basis = build_noise_basis(GridSpec(16), n_modes=5, rng=np.random.default_rng(1))
    dW = np.zeros(5)
    dW[2] = 2.0
    xu, xv = basis.combine(dW)
    np.testing.assert_allclose(xu, 2 * basis.xi_u[2])
    np.testing.assert_allclose(xv, 2 * basis.xi_v[2])
    with pytest.raises(ValueError):
        basis.combine(np.zeros(4))


def test_quad_variation_unit_coefficients():
    basis = build_noise_basis(GridSpec(16), coeffs=np.ones((25, 4)))
    assert quad_variation_rate(basis) == pytest.approx(QV_UNIT_RATE, rel=1e-12)


def _discrete_sq_norm(xu, xv):
    # mean over interior points of |xi|^2, i.e. discrete L2 with weight dx^2
    return np.mean(xu[..., 1:-1, 1:-1] ** 2, axis=(-2, -1)) + np.mean(xv[..., 1:-1, 1:-1] ** 2, axis=(-2, -1))


def test_quad_variation_matches_discrete_norms():
    basis = build_noise_basis(GridSpec(64), rng=np.random.default_rng(2))
    per_mode = _discrete_sq_norm(basis.xi_u, basis.xi_v)
    assert np.sum(per_mode) == pytest.approx(quad_variation_rate(basis), rel=1e-10)


def test_quad_variation_monte_carlo():
    basis = build_noise_basis(GridSpec(64), rng=np.random.default_rng(3))
    dt = 0.01
    dW = brownian_increments(np.random.default_rng(4), basis.n_modes, dt, size=10_000)
    xu, xv = basis.combine(dW)
    samples = _discrete_sq_norm(xu, xv) / dt
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - quad_variation_rate(basis)) < 3 * se


def test_calibration():
    assert calibrate_sigma_noise(0.7) == pytest.approx(CALIBRATED_07, rel=1e-12)
    assert calibrate_sigma_noise(1.4) == pytest.approx(2 * CALIBRATED_07, rel=1e-12)
    with pytest.raises(ValueError):
        calibrate_sigma_noise(0.0)


def test_calibrated_noise_has_target_magnitude():
    # expected QV rate over random coefficients equals (0.1 * speed)^2
    sigma = calibrate_sigma_noise(0.7)
    rates = [
        quad_variation_rate(build_noise_basis(GridSpec(8), sigma_noise=sigma, rng=np.random.default_rng(s)))
        for s in range(2000)
    ]
    assert np.mean(rates) == pytest.approx(0.07**2, rel=0.03)


def test_brownian_increment_shape_and_scale():
    dW = brownian_increments(np.random.default_rng(5), 25, 0.04, size=(400, 2))
    assert dW.shape == (400, 2, 25)
    assert dW.std() == pytest.approx(0.2, rel=0.03)


class TestJitter:
    grid = GridSpec(16)

    def test_modes_satisfy_boundary_conditions(self):
        basis = build_jitter_basis(self.grid, n_modes=10)
        d = self.grid.d
        assert np.all(basis.modes[:, 1, :, 1] == 0) and np.all(basis.modes[:, 1, :, d + 1] == 0)
        np.testing.assert_array_equal(basis.modes[:, :, 0], basis.modes[:, :, d])
        np.testing.assert_array_equal(basis.modes[:, 0, :, 0], basis.modes[:, 0, :, 1])

    def test_decay(self):
        basis = build_jitter_basis(self.grid, n_modes=4)
        x, y = self.grid.coords("eta")
        sl = (slice(1, -1), slice(1, -1))
        np.testing.assert_allclose(basis.modes[1, 2][sl], zeta_mode(x, y, 2)[2][sl] / 4, atol=1e-14)

    def test_zero_sigma_gives_zero(self):
        basis = build_jitter_basis(self.grid, sigma_jit=0.0)
        assert np.all(sample_jitter_field(basis, np.random.default_rng(0), size=3) == 0)

    def test_mean_and_variance(self):
        basis = build_jitter_basis(self.grid, n_modes=20, sigma_jit=0.05)
        samples = sample_jitter_field(basis, np.random.default_rng(6), size=10_000)
        assert samples.shape == (10_000, 3, 18, 18)
        var_exact = 0.05**2 * np.sum(basis.modes**2, axis=0)
        probe = (2, 5, 7)
        x = samples[(slice(None),) + probe]
        se = x.std(ddof=1) / np.sqrt(x.size)
        assert abs(x.mean()) < 3 * se
        # variance of a sample variance: 2 sigma^4 / (n - 1) for Gaussians
        v = x.var(ddof=1)
        assert abs(v - var_exact[probe]) < 3 * var_exact[probe] * np.sqrt(2 / (x.size - 1))

    def test_restrict_and_interior(self):
        basis = build_jitter_basis(self.grid, n_modes=3)
        blk = basis.restrict(Rect(-2, 3, 0, 4), self.grid.d)
        assert blk.modes.shape == (3, 3, 6, 5)
        assert basis.interior().modes.shape == (3, 3, 16, 16)
