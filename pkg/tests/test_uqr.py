import numpy as np
import pytest

from solodid import MicroRecord, quantile_effect_curve, rif_transform, uqr_did
from solodid.uqr import DegenerateDensity
from oracles import quantile_type7


def _records(seed=0, n_units=6, t=6, start=4, m=60, shift=0.0):
    """Location-shift design: treated post outcomes move by ``shift``."""
    gen = np.random.default_rng(seed)
    recs = []
    for i in range(n_units):
        a = 0.3 * gen.normal()
        for s in range(t):
            loc = a + 0.05 * s
            if i == 0 and s >= start:
                loc += shift
            for _ in range(m):
                recs.append(MicroRecord(f"u{i}", s, 1.0,
                                        loc + gen.normal()))
    return recs


class TestRifTransform:
    def test_mean_recenters_to_quantile(self):
        gen = np.random.default_rng(4)
        y = gen.normal(size=4000)
        for kappa in (0.1, 0.5, 0.9):
            spec, rif = rif_transform(y, kappa)
            q = quantile_type7(y, kappa)
            np.testing.assert_allclose(spec.quantile, q, atol=1e-10)
            # the transform is quantile + (kappa - 1{y<=q}) / f, so its
            # mean returns the quantile up to the indicator's sampling gap
            slack = 2.0 / (len(y) * spec.density)
            assert abs(float(rif.mean()) - q) <= slack

    def test_two_point_structure(self):
        gen = np.random.default_rng(5)
        y = gen.normal(size=500)
        spec, rif = rif_transform(y, 0.5)
        assert set(np.round(np.unique(rif), 8).tolist()) == set(
            np.round([spec.quantile - (1 - 0.5) / spec.density,
                      spec.quantile + 0.5 / spec.density], 8).tolist())

    def test_density_close_to_normal_truth(self):
        gen = np.random.default_rng(6)
        y = gen.normal(size=20_000)
        spec, _ = rif_transform(y, 0.5)
        truth = 1.0 / np.sqrt(2 * np.pi)
        assert abs(spec.density - truth) / truth < 0.1

    def test_explicit_bandwidth_respected(self):
        gen = np.random.default_rng(7)
        y = gen.normal(size=800)
        spec, _ = rif_transform(y, 0.5, bandwidth=0.37)
        assert spec.bandwidth == 0.37

    def test_constant_sample_keeps_finite_bandwidth(self):
        spec, rif = rif_transform(np.ones(300), 0.5)
        assert spec.bandwidth > 0 and np.isfinite(spec.density)
        assert np.all(np.isfinite(rif))

    def test_empty_density_region_rejected(self):
        # the median of two widely separated clusters falls in a gap the
        # kernel cannot reach at this bandwidth
        y = np.concatenate([np.zeros(150), np.full(150, 1000.0)])
        with pytest.raises(DegenerateDensity):
            rif_transform(y, 0.5, bandwidth=1.0)

    def test_too_small_sample_rejected(self):
        with pytest.raises(ValueError, match="30"):
            rif_transform(np.arange(10.0), 0.5)


class TestUqrDid:
    def test_location_shift_recovered_within_two_se(self):
        shift = 0.8
        recs = _records(seed=3, m=80, shift=shift)
        tau, se = uqr_did(recs, "u0", 4, kappa=0.5, se_mode="bootstrap",
                          B=60, seed=1)
        assert abs(tau - shift) < 2.0 * se + 0.05

    def test_zero_effect_centered(self):
        recs = _records(seed=9, m=80, shift=0.0)
        tau, se = uqr_did(recs, "u0", 4, kappa=0.5, B=60)
        assert abs(tau) < 3.0 * se + 0.05

    def test_se_modes_all_finite(self):
        recs = _records(seed=11, m=30)
        for mode in ("bootstrap", "crve", "hc2"):
            tau, se = uqr_did(recs, "u0", 4, kappa=0.3, se_mode=mode, B=50)
            assert np.isfinite(tau) and np.isfinite(se) and se > 0

    def test_seeded_bootstrap_reproducible(self):
        recs = _records(seed=13, m=30)
        a = uqr_did(recs, "u0", 4, kappa=0.7, B=50, seed=8)
        b = uqr_did(recs, "u0", 4, kappa=0.7, B=50, seed=8)
        assert a == b

    def test_kappa_bounds_validated(self):
        recs = _records(seed=1, m=10)
        for bad in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ValueError):
                uqr_did(recs, "u0", 4, kappa=bad)


class TestQuantileEffectCurve:
    def test_rows_match_pointwise_fits(self):
        recs = _records(seed=15, m=40, shift=0.5)
        grid = [0.25, 0.5, 0.75]
        curve = quantile_effect_curve(recs, "u0", 4, grid, B=50, seed=2)
        assert curve.grid.shape == curve.tau.shape == curve.se.shape == (3,)
        for i, kappa in enumerate(grid):
            tau_i, se_i = uqr_did(recs, "u0", 4, kappa=kappa, B=50, seed=2)
            np.testing.assert_allclose(curve.tau[i], tau_i, atol=1e-10)
            np.testing.assert_allclose(curve.se[i], se_i, atol=1e-10)

    def test_threshold_grid_maps_to_kappas(self):
        recs = _records(seed=17, m=50)
        y = np.array([r.outcome for r in recs])
        thresholds = np.quantile(y, [0.3, 0.6])
        curve = quantile_effect_curve(recs, "u0", 4, thresholds,
                                      grid_is_threshold=True, B=50)
        np.testing.assert_allclose(curve.grid, thresholds, atol=1e-12)
        np.testing.assert_allclose(curve.extras["thresholds"], thresholds,
                                   atol=1e-12)
        np.testing.assert_allclose(curve.extras["kappas"], [0.3, 0.6],
                                   atol=0.01)

    def test_threshold_outside_range_rejected(self):
        recs = _records(seed=17, m=40)
        hi = max(r.outcome for r in recs) + 10.0
        with pytest.raises(ValueError, match="outside"):
            quantile_effect_curve(recs, "u0", 4, [hi],
                                  grid_is_threshold=True)

    def test_grid_must_be_sorted_unique(self):
        recs = _records(seed=1, m=10)
        with pytest.raises(ValueError):
            quantile_effect_curve(recs, "u0", 4, [0.5, 0.2])
        with pytest.raises(ValueError):
            quantile_effect_curve(recs, "u0", 4, [0.4, 0.4])
