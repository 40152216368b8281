import math

import numpy as np
import pytest

from salt_lpf.filtering import Ensemble, Roughening, TemperingConfig, normalize_weights, pf_assimilate
from salt_lpf.grid import GridSpec, Rect, apply_boundary_conditions, build_decomposition, restrict_array
from salt_lpf.localization import (
    LocalizationConfig,
    RegionLikelihood,
    assign_region,
    gaspari_cohn,
    interp_ew,
    interp_sn,
    local_weights,
    lpf_assimilate,
    merge_global,
    observation_membership,
)
from salt_lpf.noise import build_jitter_basis
from salt_lpf.observations import ObservationBatch, eta_at, fixed_grid_locations, global_log_likelihood


def random_ensemble(d=16, n=10, seed=0, spread=0.05):
    rng = np.random.default_rng(seed)
    g = GridSpec(d)
    states = g.zeros(n)
    states.data[:] = rng.normal(0, spread, states.data.shape)
    states.data[:, 2] += 1.0
    return Ensemble.uniform(apply_boundary_conditions(states), 0.8)


def obs_batch(ens, d_obs=8, sigma=0.02, seed=1):
    truth = ens.states.eta[0] + 0.03
    loc = fixed_grid_locations(ens.states.d, d_obs)
    noise = np.random.default_rng(seed).normal(0, sigma, len(loc))
    return ObservationBatch(1, loc, eta_at(truth, loc) + noise, sigma)


class TestDamping:
    g = GridSpec(100)
    box = Rect(0, 50, 0, 50)

    def test_values(self):
        assert gaspari_cohn(self.box, (10, 10), 4.0, self.g) == 1.0
        assert gaspari_cohn(self.box, (75, 25), 4.0, self.g, wrap_ew=False) == pytest.approx(math.exp(-1.0))
        assert gaspari_cohn(self.box, (90, 25), 10.0, self.g) == pytest.approx(math.exp(-1.0))

    def test_alpha_zero_is_flat(self):
        z = (np.arange(100), np.full(100, 80))
        np.testing.assert_array_equal(gaspari_cohn(self.box, z, 0.0, self.g), 1.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LocalizationConfig(alpha=-1.0)


class TestMembership:
    def test_assign_region_prefers_self_then_smallest(self):
        m = np.array([[1, 0, 1, 1], [0, 1, 1, 0], [0, 0, 1, 1]], dtype=bool)
        assert assign_region(m, 0).tolist() == [0, 1, 0, 0]
        assert assign_region(m, 1).tolist() == [0, 1, 1, 0]
        assert assign_region(m, 2).tolist() == [0, 1, 2, 2]

    def test_uncovered_raises(self):
        with pytest.raises(ValueError):
            assign_region(np.array([[True, False]]), 0)

    def test_membership_with_overlap(self):
        dec = build_decomposition(GridSpec(16), 4, 2)
        m = observation_membership(dec, np.array([[0, 0], [8, 8], [4, 4]]))
        assert m.shape == (4, 3)
        assert m[:, 0].sum() == 2  # x=0 seam wraps onto the eastern column of boxes
        assert m[:, 1].sum() == 4
        assert m[:, 2].sum() == 1


class TestLocalWeights:
    def test_alpha_zero_equals_global(self):
        ens = random_ensemble()
        batch = obs_batch(ens)
        dec = build_decomposition(GridSpec(16), 4, 2)
        blocks = [restrict_array(ens.states.data, b, 16) for b in dec.boxes]
        ref = normalize_weights(global_log_likelihood(ens.states.eta, batch))
        for j in range(4):
            np.testing.assert_allclose(local_weights(j, blocks, batch, dec, 0.0), ref, rtol=1e-12)

    def test_large_alpha_ignores_far_observations(self):
        ens = random_ensemble()
        batch = obs_batch(ens)
        dec = build_decomposition(GridSpec(16), 4, 1)
        blocks = [restrict_array(ens.states.data, b, 16) for b in dec.boxes]
        m = observation_membership(dec, batch.locations)
        inside = batch.subset(m[0])
        ref = normalize_weights(global_log_likelihood(ens.states.eta, inside))
        np.testing.assert_allclose(local_weights(0, blocks, batch, dec, 1e6), ref, rtol=1e-10)

    def test_own_observations_track_updates(self):
        ens = random_ensemble()
        batch = obs_batch(ens)
        dec = build_decomposition(GridSpec(16), 4, 2)
        frozen = [restrict_array(ens.states.data, b, 16) for b in dec.boxes]
        lik = RegionLikelihood(0, dec, batch, frozen, 500.0)
        moved = frozen[0] + 0.0
        moved[:, 2] += 0.1
        base = lik.predicted(frozen[0], np.arange(10))
        new = lik.predicted(moved, np.arange(10))
        changed = np.any(new != base, axis=0)
        assert np.array_equal(changed, np.isin(np.arange(len(batch)), lik.own))


class TestMerge:
    def test_identity_on_consistent_blocks(self):
        ens = random_ensemble(d=24)
        for n_loc, h in ((4, 3), (9, 2), (16, 1), (1, 0)):
            dec = build_decomposition(GridSpec(24), n_loc, h)
            blocks = [restrict_array(ens.states.data, b, 24) for b in dec.boxes]
            np.testing.assert_allclose(merge_global(blocks, dec).data, ens.states.data, atol=1e-14)

    def test_linear_ramp_across_ew_overlap(self):
        d = 16
        dec = build_decomposition(GridSpec(d), 4, 2)
        blocks = [np.full((3,) + b.shape, float(j)) for j, b in enumerate(dec.boxes)]
        merged = merge_global(blocks, dec)
        ov = next(o for o in dec.ew_overlaps if o.rect.x0 > 0)
        w, e = ov.owners
        col = merged.eta[ov.rect.x_indices(d) + 1, ov.rect.y0 + 1]
        np.testing.assert_allclose(col, np.linspace(w, e, ov.rect.nx))

    def test_bilinear_corner(self):
        d = 16
        dec = build_decomposition(GridSpec(d), 4, 2)
        vals = [1.0, 2.0, 5.0, 11.0]
        blocks = [np.full((3,) + b.shape, vals[j]) for j, b in enumerate(dec.boxes)]
        merged = merge_global(blocks, dec)
        ov = dec.corner_overlaps[0]
        sw, se, nw, ne = (vals[j] for j in ov.owners)
        r = ov.rect
        tx = np.linspace(0, 1, r.nx)[:, None]
        ty = np.linspace(0, 1, r.ny)[None, :]
        expect = (1 - ty) * ((1 - tx) * sw + tx * se) + ty * ((1 - tx) * nw + tx * ne)
        got = merged.eta[np.ix_(r.x_indices(d) + 1, r.y_indices() + 1)]
        np.testing.assert_allclose(got, expect)

    def test_interp_endpoints_and_errors(self):
        a, b = np.zeros((2, 5, 3)), np.ones((2, 5, 3))
        out = interp_ew(a, b)
        assert np.all(out[:, 0] == 0) and np.all(out[:, -1] == 1)
        out = interp_sn(a, b)
        assert np.all(out[..., 0] == 0) and np.all(out[..., -1] == 1)
        with pytest.raises(ValueError):
            interp_ew(np.zeros((1, 1)), np.zeros((1, 1)))
        with pytest.raises(ValueError):
            merge_global([np.zeros((3, 4, 4))], build_decomposition(GridSpec(8), 4, 1))


def _rng_factory(seed):
    return lambda j: np.random.default_rng((seed, j))


class TestAssimilation:
    def test_single_region_alpha_zero_matches_global(self):
        d = 16
        ens = random_ensemble(d)
        batch = obs_batch(ens)
        basis = build_jitter_basis(GridSpec(d), n_modes=10, sigma_jit=0.01)
        cfg = TemperingConfig()
        pf, pdiag = pf_assimilate(ens, batch, cfg, np.random.default_rng((7, 0)), Roughening(basis.interior()))
        loc = LocalizationConfig(n_loc=1, alpha=0.0, overlap_halfwidth=0)
        lpf, ldiag = lpf_assimilate(
            ens, batch, loc, cfg, _rng_factory(7),
            lambda j, box: Roughening(basis.restrict(box, d)),
        )
        assert pdiag.tempering_steps == ldiag.tempering_steps > 0
        np.testing.assert_allclose(lpf.states.data, pf.states.data, rtol=0, atol=1e-12)

    def test_region_order_independent(self):
        d = 16
        ens = random_ensemble(d, n=12, seed=3)
        batch = obs_batch(ens, seed=4)
        basis = build_jitter_basis(GridSpec(d), n_modes=10, sigma_jit=0.01)
        loc = LocalizationConfig(n_loc=4, alpha=50.0, overlap_halfwidth=2)

        class Reversed:
            def map(self, fn, items):
                items = list(items)
                out = {j: fn(j) for j in reversed(items)}
                return [out[j] for j in items]

        def run(executor):
            return lpf_assimilate(
                ens, batch, loc, TemperingConfig(), _rng_factory(11),
                lambda j, box: Roughening(basis.restrict(box, d)), executor=executor,
            )

        a, da = run(None)
        b, db = run(Reversed())
        np.testing.assert_array_equal(a.states.data, b.states.data)
        assert [r.tempering_steps for r in da.regions] == [r.tempering_steps for r in db.regions]

    def test_no_update_when_ess_high(self):
        ens = random_ensemble(spread=1e-6)
        batch = obs_batch(ens, sigma=1.0)
        loc = LocalizationConfig(n_loc=4, overlap_halfwidth=2)
        out, diag = lpf_assimilate(ens, batch, loc, TemperingConfig(), _rng_factory(0))
        assert out.states is ens.states and diag.regions == []

    def test_weights_reset_and_blocks_consistent(self):
        d = 16
        ens = random_ensemble(d)
        batch = obs_batch(ens)
        out, diag = lpf_assimilate(ens, batch, LocalizationConfig(n_loc=4, overlap_halfwidth=2),
                                   TemperingConfig(jitter_kind="none"), _rng_factory(5))
        np.testing.assert_allclose(out.weights, 1 / ens.size)
        assert len(diag.regions) == 4
        assert np.isfinite(out.states.data).all()
        # v on the south wall stays zero after merging
        assert np.all(out.states.v[:, :, 1] == 0)
