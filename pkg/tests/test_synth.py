import math

import numpy as np
import pytest
from scipy import stats

from gridcp import SynthConfig, oracle_quantiles, synthesize_dataset, synthesize_records
from gridcp.grids import CoarseField, validate_dataset
from gridcp.synth import (bilinear_upsample, bilinear_upsample_at,
                          deterministic_field, elevation_field,
                          elevation_perturbation, emulate_ensemble,
                          generate_pair, record_rng, sigma_field,
                          skew_normal_draws, smooth3,
                          standard_skew_normal_cdf,
                          standard_skew_normal_quantile)


class TestSynthConfig:
    def test_fine_dims(self):
        cfg = SynthConfig()
        assert cfg.coarse_dims == (9, 11)
        assert cfg.fine_dims == (72, 88)

    def test_dict_round_trip(self, tiny_synth):
        assert SynthConfig.from_dict(tiny_synth.to_dict()) == tiny_synth

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown synth config keys.*spread"):
            SynthConfig.from_dict({"spread": 2.0})

    @pytest.mark.parametrize("field,value", [
        ("coarse_dims", (0, 4)),
        ("upscale_factor", 0),
        ("noise_seed", -1),
        ("base_sigma", 0.0),
        ("heterosc_gain", -0.5),
        ("skew", 1.0),
        ("skew", -1.0),
        ("dispersion_factor", -0.1),
        ("member_count", 0),
    ])
    def test_invalid_values_rejected(self, field, value):
        with pytest.raises(ValueError):
            SynthConfig(**{field: value})

    def test_zero_dispersion_allowed(self):
        assert SynthConfig(dispersion_factor=0.0).dispersion_factor == 0.0


class TestSmooth3:
    def test_preserves_constants(self):
        out = smooth3(np.full((5, 7), 2.5))
        assert np.allclose(out, 2.5, rtol=0, atol=1e-15)

    def test_interior_impulse_response(self):
        arr = np.zeros((7, 7))
        arr[3, 3] = 1.0
        out = smooth3(arr)
        assert out[3, 3] == 0.25
        assert out[3, 2] == out[3, 4] == out[2, 3] == out[4, 3] == 0.125
        assert out[2, 2] == out[4, 4] == 0.0625
        assert out[3, 0] == 0.0

    def test_batch_axis_matches_loop(self, rng):
        batch = rng.standard_normal((4, 3, 5))
        stacked = smooth3(batch)
        for i in range(4):
            assert np.array_equal(stacked[i], smooth3(batch[i]))


class TestBilinearUpsample:
    def test_shape_and_constant(self):
        out = bilinear_upsample(np.full((3, 4), 1.25), 8)
        assert out.shape == (24, 32)
        assert np.allclose(out, 1.25, rtol=0, atol=1e-15)

    def test_ramp_interpolates_to_cell_centers(self):
        # a linear coarse field reproduces the clamped source coordinate
        w, factor = 5, 4
        ramp = np.tile(np.arange(w, dtype=float), (2, 1))
        fine = bilinear_upsample(ramp, factor)
        src = np.clip((np.arange(w * factor) + 0.5) / factor - 0.5, 0, w - 1)
        assert np.allclose(fine, np.tile(src, (2 * factor, 1)), atol=1e-12)

    def test_point_gather_matches_full_grid(self, rng):
        coarse = rng.standard_normal((6, 3, 4))
        full = bilinear_upsample(coarse, 8)
        rows = rng.integers(0, 24, size=50)
        cols = rng.integers(0, 32, size=50)
        gathered = bilinear_upsample_at(coarse, 8, rows, cols)
        assert np.array_equal(gathered, full[..., rows, cols])


class TestStaticFields:
    def test_elevation_normalized(self, tiny_synth):
        elev = elevation_field(tiny_synth)
        assert elev.shape == tiny_synth.fine_dims
        assert elev.min() == 0.0 and elev.max() == 1.0

    def test_sigma_formula(self, tiny_synth):
        expected = tiny_synth.base_sigma * (
            1.0 + tiny_synth.heterosc_gain * elevation_field(tiny_synth))
        assert np.array_equal(sigma_field(tiny_synth), expected)

    def test_perturbation_formula(self, tiny_synth):
        expected = 2.0 * tiny_synth.base_sigma * (elevation_field(tiny_synth) - 0.5)
        assert np.array_equal(elevation_perturbation(tiny_synth), expected)

    def test_cached_per_config(self, tiny_synth):
        twin = SynthConfig.from_dict(tiny_synth.to_dict())
        assert elevation_field(twin) is elevation_field(tiny_synth)
        other = SynthConfig.from_dict({**tiny_synth.to_dict(), "elevation_seed": 8})
        assert not np.array_equal(elevation_field(other), elevation_field(tiny_synth))

    def test_fields_are_read_only(self, tiny_synth):
        with pytest.raises(ValueError):
            elevation_field(tiny_synth)[0, 0] = 1.0

    def test_deterministic_field_accepts_wrapper_or_array(self, tiny_synth, rng):
        coarse = rng.standard_normal(tiny_synth.coarse_dims)
        a = deterministic_field(tiny_synth, coarse)
        b = deterministic_field(tiny_synth, CoarseField(coarse))
        assert np.array_equal(a, b)
        assert np.array_equal(
            a, bilinear_upsample(coarse, tiny_synth.upscale_factor)
            + elevation_perturbation(tiny_synth))


class TestSkewNormalDraws:
    def test_zero_skew_moments(self):
        rng = np.random.Generator(np.random.PCG64(5))
        z = skew_normal_draws(rng, (200_000,), 0.0)
        assert abs(z.mean()) < 0.01
        assert abs(z.var() - 1.0) < 0.02

    def test_skewed_moments(self):
        # mean delta * sqrt(2/pi), variance 1 - 2 delta^2 / pi
        delta = 0.6
        rng = np.random.Generator(np.random.PCG64(6))
        z = skew_normal_draws(rng, (400_000,), delta)
        m = delta * math.sqrt(2 / math.pi)
        v = 1 - 2 * delta**2 / math.pi
        assert z.mean() == pytest.approx(m, abs=0.01)
        assert z.var() == pytest.approx(v, abs=0.01)
        assert stats.skew(z) == pytest.approx((2 - math.pi / 2) * m**3 / v**1.5,
                                              abs=0.02)

    def test_draws_match_cdf(self):
        # one-sample KS against the closed-form CDF at the same delta
        delta = 0.6
        rng = np.random.Generator(np.random.PCG64(7))
        z = skew_normal_draws(rng, (20_000,), delta)
        ks = stats.ks_1samp(z, lambda v: standard_skew_normal_cdf(v, delta))
        assert ks.pvalue > 0.01


class TestSkewNormalClosedForm:
    """Cross-check CDF and quantile against scipy's independent skewnorm."""

    @pytest.mark.parametrize("delta", [0.0, 0.3, 0.6, -0.8])
    def test_cdf_matches_scipy(self, delta):
        z = np.linspace(-5, 5, 41)
        if delta == 0.0:
            expected = stats.norm.cdf(z)
        else:
            a = delta / math.sqrt(1 - delta * delta)
            expected = stats.skewnorm.cdf(z, a)
        assert np.allclose(standard_skew_normal_cdf(z, delta), expected,
                           rtol=0, atol=1e-10)

    @pytest.mark.parametrize("delta", [0.0, 0.6, -0.4])
    def test_quantile_matches_scipy(self, delta):
        gammas = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99]
        a = delta / math.sqrt(1 - delta * delta) if delta else 0.0
        for gamma in gammas:
            got = standard_skew_normal_quantile(gamma, delta)
            want = stats.skewnorm.ppf(gamma, a) if delta else stats.norm.ppf(gamma)
            assert got == pytest.approx(want, abs=1e-8)

    def test_quantile_cdf_round_trip(self):
        for gamma in [0.05, 0.5, 0.9, 0.975]:
            q = standard_skew_normal_quantile(gamma, 0.6)
            assert standard_skew_normal_cdf(q, 0.6) == pytest.approx(gamma, abs=1e-9)


class TestOracleQuantiles:
    def test_quantile_surface_formula(self, tiny_synth, rng):
        coarse = rng.standard_normal(tiny_synth.coarse_dims)
        oracle = oracle_quantiles(tiny_synth, coarse)
        z = standard_skew_normal_quantile(0.9, tiny_synth.skew)
        expected = (deterministic_field(tiny_synth, coarse)
                    + sigma_field(tiny_synth) * z)
        assert np.allclose(oracle.quantile(0.9), expected, atol=1e-12)

    def test_cdf_inverts_quantile_everywhere(self, tiny_synth, rng):
        oracle = oracle_quantiles(
            tiny_synth, rng.standard_normal(tiny_synth.coarse_dims))
        for gamma in [0.05, 0.5, 0.95]:
            probs = oracle.cdf(oracle.quantile(gamma))
            assert np.allclose(probs, gamma, atol=1e-9)

    def test_monotone_in_level(self, tiny_synth, rng):
        oracle = oracle_quantiles(
            tiny_synth, rng.standard_normal(tiny_synth.coarse_dims))
        q = np.stack([oracle.quantile(g) for g in (0.1, 0.5, 0.9)])
        assert (np.diff(q, axis=0) > 0).all()


class TestRecordGeneration:
    def test_pair_reconstruction(self, tiny_synth):
        coarse, truth = generate_pair(tiny_synth, record_rng(tiny_synth, 0, "pair"))
        assert coarse.values.shape == tiny_synth.coarse_dims
        assert truth.values.shape == tiny_synth.fine_dims
        # the noise-free part is recoverable, residual scale is sigma-sized
        residual = truth.values - deterministic_field(tiny_synth, coarse)
        assert np.abs(residual / sigma_field(tiny_synth)).max() < 8.0

    def test_zero_dispersion_collapses_members(self, tiny_synth):
        cfg = SynthConfig.from_dict(
            {**tiny_synth.to_dict(), "dispersion_factor": 0.0})
        coarse, _ = generate_pair(cfg, record_rng(cfg, 0, "pair"))
        ens = emulate_ensemble(cfg, coarse, record_rng(cfg, 0, "ensemble"))
        det = deterministic_field(cfg, coarse)
        for member in ens.members:
            assert np.array_equal(member.values, det)

    def test_dispersion_scales_spread(self, tiny_synth):
        coarse, _ = generate_pair(tiny_synth, record_rng(tiny_synth, 0, "pair"))
        spreads = []
        for lam in (0.5, 1.0):
            cfg = SynthConfig.from_dict(
                {**tiny_synth.to_dict(), "dispersion_factor": lam})
            ens = emulate_ensemble(cfg, coarse, record_rng(cfg, 0, "ensemble"))
            spreads.append(ens.stacked().std(axis=0).mean())
        # identical noise draws, so doubling lambda doubles the spread
        assert spreads[1] == pytest.approx(2 * spreads[0], rel=1e-12)

    def test_stream_indexing_is_order_free(self, tiny_synth):
        batch = synthesize_records(tiny_synth, 3)
        solo = synthesize_records(tiny_synth, 1, start_index=2)[0]
        assert np.array_equal(batch[2].truth.values, solo.truth.values)
        assert np.array_equal(batch[2].coarse.values, solo.coarse.values)
        assert np.array_equal(batch[2].ensemble.stacked(), solo.ensemble.stacked())

    def test_records_differ_across_indices(self, tiny_synth):
        a, b = synthesize_records(tiny_synth, 2)
        assert not np.array_equal(a.truth.values, b.truth.values)

    def test_truth_independent_of_member_count(self, tiny_synth):
        # truth and ensemble use separate noise streams
        more = SynthConfig.from_dict({**tiny_synth.to_dict(), "member_count": 20})
        a = synthesize_records(tiny_synth, 1)[0]
        b = synthesize_records(more, 1)[0]
        assert np.array_equal(a.truth.values, b.truth.values)
        assert np.array_equal(a.coarse.values, b.coarse.values)

    def test_dataset_passes_validation(self, tiny_synth):
        ds = synthesize_dataset(tiny_synth, 4, "calibration")
        assert ds.split_tag == "calibration"
        assert len(ds.records) == 4
        validate_dataset(ds)
