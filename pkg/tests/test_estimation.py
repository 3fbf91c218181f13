import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scgscale.estimation import (
    FitTerm,
    PowerLawModel,
    PowerLawTerm,
    bundled_constant_laws,
    estimate_L,
    estimate_mu,
    estimate_rho,
    estimate_variance,
    fit_power_law,
    huber_line_fit,
    smoothness_from_steps,
)
from scgscale.geometry import BlockGeometry, LayeredPoint
from scgscale.optimizer import ConstantBeta, ScgConfig, run
from scgscale.problems import LayeredQuadratic, NoiseModel


class TestPowerLawModel:
    def test_evaluation(self):
        m = PowerLawModel(2.0, (PowerLawTerm("x", 1.0, 2.0),))
        assert m.value({"x": 3.0}) == pytest.approx(2.0 * 16.0)

    def test_missing_covariate(self):
        m = PowerLawModel(2.0, (PowerLawTerm("x", 0.0, 1.0),))
        with pytest.raises(KeyError):
            m.value({"y": 1.0})

    def test_nonpositive_base(self):
        m = PowerLawModel(2.0, (PowerLawTerm("x", -5.0, 1.0),))
        with pytest.raises(ValueError, match="positive"):
            m.value({"x": 3.0})

    def test_dict_round_trip(self):
        m = PowerLawModel(0.4, (PowerLawTerm("n_layer", 0.7, 0.2),))
        assert PowerLawModel.from_dict(m.to_dict()) == m

    def test_bundled_law_values_match_measured_constants(self):
        laws = bundled_constant_laws()
        cov = {"n_layer": 12.0, "n_embd": 768.0, "batch_size": 512.0}
        assert laws["mu"].value(cov) == pytest.approx(3.1, abs=0.05)
        assert laws["L"].value(cov) == pytest.approx(7.2, abs=0.1)


class TestHuberLineFit:
    def test_exact_line(self):
        x = np.linspace(0.0, 4.0, 40)
        fit = huber_line_fit(x, 3.1 * x + 0.2)
        assert fit.slope == pytest.approx(3.1, abs=1e-9)
        assert fit.intercept == pytest.approx(0.2, abs=1e-9)

    def test_two_points(self):
        fit = huber_line_fit(np.array([0.0, 1.0]), np.array([0.0, 2.7]))
        assert fit.slope == pytest.approx(2.7)

    def test_robust_to_outliers(self):
        rng = np.random.default_rng(0)
        x = np.linspace(0.1, 5.0, 100)
        y = 3.1 * x
        idx = rng.choice(100, size=10, replace=False)
        y = y.copy()
        y[idx] *= 10.0
        fit = huber_line_fit(x, y)
        assert 2.8 <= fit.slope <= 3.4

    def test_infinite_delta_matches_ols(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 5, 60)
        y = 2.0 * x + 1.0 + rng.standard_normal(60)
        fit = huber_line_fit(x, y, delta=math.inf)
        ols = np.polyfit(x, y, 1)
        assert fit.slope == pytest.approx(ols[0], abs=1e-9)
        assert fit.intercept == pytest.approx(ols[1], abs=1e-9)

    def test_zero_spread_rejected(self):
        with pytest.raises(ValueError, match="spread"):
            huber_line_fit(np.ones(5), np.arange(5.0))


class TestEstimateMu:
    def test_cap_filters_points(self):
        losses = np.array([1.0, 2.0, 3.0, 50.0, 80.0])
        norms = 3.1 * losses
        norms[-2:] = 1000.0  # junk above the cap
        fit = estimate_mu(losses, norms, loss_cap=5.0)
        assert fit.slope == pytest.approx(3.1, abs=1e-9)
        assert fit.n_points == 3

    def test_needs_two_points_below_cap(self):
        with pytest.raises(ValueError, match="below"):
            estimate_mu([10.0, 20.0], [1.0, 2.0], loss_cap=5.0)

    @given(st.floats(0.1, 50.0))
    @settings(max_examples=40, deadline=None)
    def test_scale_equivariance(self, a):
        losses = np.linspace(0.2, 4.0, 30)
        norms = 2.5 * losses + 0.3
        base = estimate_mu(losses, norms).slope
        scaled_x = estimate_mu(a * losses, norms, loss_cap=5.0 * a).slope
        scaled_y = estimate_mu(losses, a * norms).slope
        assert scaled_x == pytest.approx(base / a, rel=1e-8)
        assert scaled_y == pytest.approx(base * a, rel=1e-8)


def run_quadratic(lam=2.5, sigma=0.0, iters=50, dim=4, seed=0):
    rng = np.random.default_rng(9)
    theta = rng.standard_normal(dim)
    theta /= np.linalg.norm(theta)
    spec = LayeredQuadratic(
        geometry=(BlockGeometry("euclidean", (dim,), 3.0),),
        block_names=("w",),
        curvatures=(lam,),
        targets=(theta,),
        noise=NoiseModel(sigma, B=8.0, S=4.0),
    )
    cfg = ScgConfig(
        alpha=0.5, beta=ConstantBeta(0.02), iters=iters, seed=seed, store_gradients=True
    )
    return spec, run(spec, cfg)


class TestEstimateL:
    def test_exact_on_deterministic_quadratic(self):
        spec, log = run_quadratic(lam=2.5, sigma=0.0)
        assert estimate_L(log, spec.geometry) == pytest.approx(2.5, rel=1e-9)

    def test_window_one_takes_last_ratio(self):
        diffs = np.array([4.0, 6.0])
        disps = np.array([2.0, 2.0])
        assert smoothness_from_steps(diffs, disps, window=1) == pytest.approx(3.0)

    def test_recovers_under_noise(self):
        spec, log = run_quadratic(lam=4.0, sigma=0.01, iters=300)
        assert estimate_L(log, spec.geometry) == pytest.approx(4.0, rel=0.1)

    def test_degenerate_steps_skipped(self):
        diffs = np.array([1.0, 5.0])
        disps = np.array([0.0, 2.5])
        assert smoothness_from_steps(diffs, disps) == pytest.approx(2.0)

    def test_all_degenerate_raises(self):
        with pytest.raises(ValueError, match="degenerate"):
            smoothness_from_steps(np.ones(3), np.zeros(3))

    def test_needs_stored_gradients(self):
        spec = run_quadratic()[0]
        cfg = ScgConfig(alpha=0.5, beta=ConstantBeta(0.02), iters=5, seed=0)
        log = run(spec, cfg)
        with pytest.raises(ValueError, match="gradients"):
            estimate_L(log, spec.geometry)


class TestEstimateRho:
    def _pairs(self, kind, dim, n_pairs, seed=0):
        rng = np.random.default_rng(seed)
        geometry = [BlockGeometry(kind, (dim,))]
        pairs = []
        for _ in range(n_pairs):
            ref = rng.standard_normal(dim)
            noisy = ref + rng.standard_normal(dim)
            pairs.append(
                (LayeredPoint([("w", noisy)]), LayeredPoint([("w", ref)]))
            )
        return pairs, geometry

    def test_euclidean_ratio_is_one(self):
        pairs, geom = self._pairs("euclidean", 16, 20)
        assert estimate_rho(pairs, geom) == pytest.approx(1.0, rel=1e-12)

    def test_sign_ratio_within_norm_bounds(self):
        dim = 64
        pairs, geom = self._pairs("sign", dim, 50)
        rho = estimate_rho(pairs, geom)
        assert 1.0 <= rho <= math.sqrt(dim)

    def test_gaussian_sign_ratio_near_analytic(self):
        # l1/l2 ratio of an n-dim gaussian concentrates near sqrt(2 n / pi)
        dim = 1024
        pairs, geom = self._pairs("sign", dim, 200, seed=3)
        rho = estimate_rho(pairs, geom, window=200)
        assert rho == pytest.approx(math.sqrt(2.0 * dim / math.pi), rel=0.1)

    def test_degenerate_pairs_skipped_then_error(self):
        geom = [BlockGeometry("euclidean", (3,))]
        same = LayeredPoint([("w", np.ones(3))])
        with pytest.raises(ValueError, match="degenerate"):
            estimate_rho([(same, same)], geom)


class TestEstimateVariance:
    @staticmethod
    def planted_oracle(sigma_star, dim=8):
        def oracle(x, b, rng):
            return rng.standard_normal(dim) * (sigma_star / math.sqrt(b * dim))

        return oracle

    def test_recovers_inverse_scale_law(self):
        curve = estimate_variance(
            self.planted_oracle(2.0), None, [8.0, 16.0, 32.0, 64.0, 128.0], 4096, seed=1
        )
        term = curve.fitted.terms[0]
        assert -1.1 <= term.exponent <= -0.9
        assert abs(term.shift) < 8.0

    def test_zero_noise_rejected(self):
        with pytest.raises(ValueError, match="degenerate|zero"):
            estimate_variance(
                lambda x, b, rng: np.zeros(4), None, [8.0, 16.0, 32.0], 128, seed=0
            )

    def test_pool_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            estimate_variance(self.planted_oracle(1.0), None, [3.0, 7.0], 64, seed=0)

    def test_needs_two_draws(self):
        with pytest.raises(ValueError, match="2 draws"):
            estimate_variance(self.planted_oracle(1.0), None, [64.0, 128.0], 128, seed=0)

    def test_two_seeds_agree_at_large_pool(self):
        scales = [16.0, 64.0, 256.0]
        a = estimate_variance(self.planted_oracle(1.5), None, scales, 32768, seed=0)
        b = estimate_variance(self.planted_oracle(1.5), None, scales, 32768, seed=1)
        for (_, va), (_, vb) in zip(a.points, b.points):
            assert abs(va - vb) / va < 0.2


class TestFitPowerLaw:
    def test_recovers_bundled_mu_law(self):
        law = bundled_constant_laws()["mu"]
        n_layer = np.arange(3.0, 31.0)
        values = np.array([law.value({"n_layer": n}) for n in n_layer])
        fitted = fit_power_law({"n_layer": n_layer}, values, [FitTerm("n_layer")])
        term = fitted.terms[0]
        assert fitted.coefficient == pytest.approx(5.2, rel=0.05)
        assert term.shift == pytest.approx(1.7, rel=0.05)
        assert term.exponent == pytest.approx(-0.2, rel=0.05)

    def test_exact_fit_residual_small(self):
        x = np.linspace(2.0, 40.0, 25)
        values = 3.0 * (x + 5.0) ** 0.7
        fitted = fit_power_law({"x": x}, values, [FitTerm("x")])
        pred = np.array([fitted.value({"x": v}) for v in x])
        assert np.max(np.abs(np.log(pred) - np.log(values))) < 1e-8

    def test_fixed_parameters_respected(self):
        x = np.linspace(1.0, 20.0, 15)
        values = 2.0 * (x + 1.0) ** -0.5
        fitted = fit_power_law(
            {"x": x}, values, [FitTerm("x", shift=1.0, exponent=None)]
        )
        assert fitted.terms[0].shift == 1.0
        assert fitted.terms[0].exponent == pytest.approx(-0.5, abs=1e-6)

    def test_nonpositive_values_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            fit_power_law({"x": np.array([1.0, 2.0])}, np.array([1.0, -1.0]), [FitTerm("x")])

    def test_insufficient_observations(self):
        with pytest.raises(ValueError, match="observations"):
            fit_power_law({"x": np.array([1.0, 2.0])}, np.array([1.0, 2.0]), [FitTerm("x")])

    def test_two_covariate_recovery(self):
        rng = np.random.default_rng(5)
        n_layer = rng.uniform(3, 30, 40)
        n_embd = rng.uniform(300, 2000, 40)
        law = bundled_constant_laws()["L"]
        values = np.array(
            [law.value({"n_layer": a, "n_embd": b}) for a, b in zip(n_layer, n_embd)]
        )
        fitted = fit_power_law(
            {"n_layer": n_layer, "n_embd": n_embd},
            values,
            [FitTerm("n_layer"), FitTerm("n_embd")],
        )
        by_name = {t.name: t for t in fitted.terms}
        assert by_name["n_layer"].exponent == pytest.approx(0.2, abs=0.02)
        assert by_name["n_embd"].exponent == pytest.approx(0.35, abs=0.02)
