"""
Tests for kriging and posterior predictive curves
"""

import numpy as np
import pytest
from scipy.linalg import cholesky, solve_triangular

from sfbayes.exceptions import InputError
from sfbayes.models import BasisSpec, KernelFamily, ModelState, SpatialKernel, correlation_factor, kernel_matrix
from sfbayes.schemas import PredictionRequest, PriorSpec, SamplerConfig, TargetSite
from sfbayes.utils.prediction import (
    fitted_curve,
    krige_conditional,
    krige_theta,
    predict_curves,
    simulate_ar_chain,
    uniform_target_times,
)
from sfbayes.utils.sampler import PosteriorDraws

OBS = np.array([[0.0, 0.0], [1.0, 0.0], [0.3, 0.9]])


def state(theta, mu, kappa2=1.5, spatial_decay=0.8, n=5):
    theta = np.asarray(theta, dtype=float)
    return ModelState(
        theta=theta,
        mu_theta=np.asarray(mu, dtype=float),
        delta=[np.zeros(n) for _ in range(theta.shape[1])],
        tau2=0.2,
        nu2=0.3,
        kappa2=kappa2,
        spatial_decay=spatial_decay,
        ar_decay=0.5,
    )


def posterior(states, spec, coords=OBS, include_random_effect=True):
    return PosteriorDraws(
        states=list(states),
        log_joint=np.zeros(len(states)),
        acceptance={},
        spec=spec,
        site_ids=tuple(f"s{j + 1:02d}" for j in range(coords.shape[0])),
        coords=coords,
        kernel_family=KernelFamily.GAUSSIAN,
        config=SamplerConfig(total_iterations=10, burn_in=0, thin=1, include_random_effect=include_random_effect),
        priors=PriorSpec(),
        seed=1,
    )


@pytest.fixture
def draw():
    return state([[1.0, 2.0, 0.5], [0.0, -1.0, 2.0]], [1.0, 0.5])


class TestKrigingConditional:
    def test_coincident_target_reproduces_observed_site(self, draw):
        conditional = krige_conditional(draw, OBS, OBS[1:2])
        np.testing.assert_allclose(conditional.mean[:, 0], draw.theta[:, 1], atol=1e-7)
        assert abs(conditional.covariance[0, 0]) < 1e-7 * draw.kappa2

    def test_far_target_reverts_to_prior(self, draw):
        conditional = krige_conditional(draw, OBS, [[1e6, 1e6]])
        np.testing.assert_allclose(conditional.mean[:, 0], draw.mu_theta, rtol=1e-12)
        assert conditional.covariance[0, 0] == pytest.approx(draw.kappa2, rel=1e-12)

    def test_matches_dense_joint_conditioning(self, draw):
        target = np.array([[0.5, 0.4]])
        conditional = krige_conditional(draw, OBS, target)

        factor = correlation_factor(KernelFamily.GAUSSIAN, draw.spatial_decay, OBS)
        joint = kernel_matrix(SpatialKernel(KernelFamily.GAUSSIAN, 1.0, draw.spatial_decay), np.vstack([OBS, target]))
        joint[:3, :3] += factor.jitter * np.eye(3)
        lower = cholesky(draw.kappa2 * joint, lower=True)
        l11, l21, l22 = lower[:3, :3], lower[3:, :3], lower[3:, 3:]
        for r in range(2):
            resid = draw.theta[r] - draw.mu_theta[r]
            expected = draw.mu_theta[r] + l21 @ solve_triangular(l11, resid, lower=True)
            assert conditional.mean[r, 0] == pytest.approx(expected[0], abs=1e-10)
        assert conditional.covariance[0, 0] == pytest.approx((l22 @ l22.T)[0, 0], abs=1e-10)

    def test_constant_field_is_reproduced(self):
        flat = state([[2.5, 2.5, 2.5]], [2.5])
        conditional = krige_conditional(flat, OBS, [[0.5, 0.5], [3.0, -2.0]])
        np.testing.assert_allclose(conditional.mean, 2.5, atol=1e-12)

    def test_site_permutation_invariance(self, draw):
        order = [2, 0, 1]
        permuted = state(draw.theta[:, order], draw.mu_theta)
        target = [[0.5, 0.4], [2.0, 1.0]]
        a = krige_conditional(draw, OBS, target)
        b = krige_conditional(permuted, OBS[order], target)
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
        np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-10)

    def test_non_finite_target_rejected(self, draw):
        with pytest.raises(InputError):
            krige_conditional(draw, OBS, [[np.nan, 0.0]])

    def test_theta_draws_have_conditional_moments(self, draw):
        rng = np.random.default_rng(8)
        target = [[0.5, 0.4]]
        samples = np.array([krige_theta(draw, OBS, target, rng)[:, 0] for _ in range(4000)])
        conditional = krige_conditional(draw, OBS, target)
        sd = np.sqrt(conditional.covariance[0, 0])
        np.testing.assert_allclose(samples.mean(axis=0), conditional.mean[:, 0], atol=4 * sd / np.sqrt(4000))
        np.testing.assert_allclose(samples.std(axis=0), sd, rtol=0.05)


def test_simulated_chain_starts_from_prior_variance():
    rng = np.random.default_rng(0)
    first = np.array([simulate_ar_chain(np.array([0.0, 1.0]), 0.5, 2.0, rng) for _ in range(20_000)])
    assert first[:, 0].var() == pytest.approx(2.0, rel=0.05)
    phi = np.exp(-0.5)
    assert np.corrcoef(first.T)[0, 1] == pytest.approx(phi / np.sqrt(1.0 + phi**2), abs=0.03)


class TestPredictCurves:
    spec = BasisSpec(1, (0.0, 4.0))

    def request(self, **kwargs):
        target = TargetSite(site_id="new", x=0.0, y=0.0, times=[0.0, 1.0, 2.0, 4.0])
        return PredictionRequest(targets=[target], **kwargs)

    def test_single_draw_without_noise_follows_observed_site(self, draw):
        draws = posterior([draw], self.spec)
        curves = predict_curves(draws, self.request(include_delta=False, include_obs_noise=False))
        u = np.array([0.0, 1.0, 2.0, 4.0]) / 4.0
        expected = draw.theta[0, 0] * (1.0 - u) + draw.theta[1, 0] * u
        curve = curves[0]
        np.testing.assert_allclose(curve.mean, expected, atol=1e-3)
        np.testing.assert_array_equal(curve.lower, curve.mean)
        np.testing.assert_array_equal(curve.upper, curve.mean)

    def test_same_generator_same_prediction(self, draw):
        draws = posterior([draw] * 12, self.spec)
        a = predict_curves(draws, self.request(), rng=np.random.default_rng(3))[0]
        b = predict_curves(draws, self.request(), rng=np.random.default_rng(3))[0]
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.lower, b.lower)

    def test_noise_and_delta_widen_bands(self, draw):
        draws = posterior([draw] * 300, self.spec)
        target = TargetSite(site_id="gap", x=0.5, y=0.4, times=[0.0, 1.0, 2.0, 4.0])
        plain = PredictionRequest(targets=[target], include_delta=False, include_obs_noise=False)
        full = PredictionRequest(targets=[target], include_delta=True, include_obs_noise=True)
        narrow = predict_curves(draws, plain, rng=np.random.default_rng(1))[0]
        wide = predict_curves(draws, full, rng=np.random.default_rng(1))[0]
        assert np.mean(wide.upper - wide.lower) > np.mean(narrow.upper - narrow.lower)

    def test_bands_contain_mean(self, draw):
        draws = posterior([draw] * 15, self.spec)
        target = TargetSite(site_id="gap", x=0.5, y=0.4, times=[0.0, 2.0])
        curve = predict_curves(draws, PredictionRequest(targets=[target], keep_samples=True))[0]
        assert np.all(curve.lower <= curve.mean) and np.all(curve.mean <= curve.upper)
        assert curve.samples.shape == (15, 2)

    def test_few_draws_fall_back_to_range(self, draw):
        draws = posterior([draw] * 3, self.spec)
        target = TargetSite(site_id="gap", x=0.5, y=0.4, times=[0.0, 2.0])
        curve = predict_curves(draws, PredictionRequest(targets=[target], keep_samples=True))[0]
        np.testing.assert_array_equal(curve.lower, np.minimum(curve.samples.min(axis=0), curve.mean))
        np.testing.assert_array_equal(curve.upper, np.maximum(curve.samples.max(axis=0), curve.mean))

    def test_delta_skipped_for_fit_without_random_effect(self, draw):
        target = TargetSite(site_id="new", x=0.0, y=0.0, times=[0.0, 1.0])
        request = PredictionRequest(targets=[target], include_obs_noise=False, include_delta=True)
        ablated = posterior([draw] * 2, self.spec, include_random_effect=False)
        curves = predict_curves(ablated, request, rng=np.random.default_rng(0))
        expected = [draw.theta[0, 0], 0.75 * draw.theta[0, 0] + 0.25 * draw.theta[1, 0]]
        np.testing.assert_allclose(curves[0].mean, expected, atol=1e-3)

    def test_empty_draws_rejected(self):
        with pytest.raises(InputError):
            predict_curves(posterior([], self.spec), self.request())

    def test_frame_columns(self, draw):
        curve = predict_curves(posterior([draw], self.spec), self.request())[0]
        assert list(curve.to_frame().columns) == ["site_id", "t", "mean", "hpd_lo", "hpd_hi"]


def test_fitted_curve_averages_draws():
    spec = BasisSpec(1, (0.0, 1.0))
    a = state([[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], [0.0, 0.0], n=2)
    b = state([[3.0, 0.0, 0.0], [5.0, 0.0, 0.0]], [0.0, 0.0], n=2)
    a.delta[0] = np.array([1.0, 1.0])
    draws = posterior([a, b], spec)
    np.testing.assert_allclose(fitted_curve(draws, 0, [0.0, 1.0]), [2.0, 4.0])
    np.testing.assert_allclose(fitted_curve(draws, 0, [0.0, 1.0], include_delta=True), [2.5, 4.5])
    with pytest.raises(InputError):
        fitted_curve(draws, 0, [0.0, 0.5, 1.0], include_delta=True)


def test_uniform_target_times():
    times = uniform_target_times(BasisSpec(2, (1.0, 3.0)), 5)
    assert times == [1.0, 1.5, 2.0, 2.5, 3.0]
