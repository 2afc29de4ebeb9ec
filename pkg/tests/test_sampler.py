"""
Tests for the Metropolis-within-Gibbs sampler
Run from project root: pytest tests/test_sampler.py
Slow joint-distribution and recovery checks: pytest -m slow tests/test_sampler.py
"""

import numpy as np
import pytest
from scipy.linalg import cholesky, solve_triangular
from scipy.stats import invgamma, kstest

from conftest import make_sites, make_state
from sfbayes.exceptions import InputError, NumericalError
from sfbayes.models import (
    BasisSpec,
    KernelFactorCache,
    KernelFamily,
    ModelData,
    ModelState,
    SiteSeries,
    SpatialKernel,
    correlation_factor,
    design_matrix,
    kernel_matrix,
)
from sfbayes.schemas import McPlan, PriorSpec, SamplerConfig
from sfbayes.utils import sampler as sampler_module
from sfbayes.utils.metrics import effective_sample_size
from sfbayes.utils.prediction import simulate_ar_chain
from sfbayes.utils.sampler import (
    MetropolisStep,
    MetropolisWithinGibbs,
    delta_conditional,
    impute_missing,
    kappa2_conditional,
    metropolis_log_step,
    mu_theta_conditional,
    nu2_conditional,
    run_chain,
    sample_banded_gaussian,
    tau2_conditional,
    theta_conditional,
    update_decays,
    update_delta,
    update_variances,
)
from sfbayes.utils.synthetic import GapScheme, generate_study1


def dense_precision(banded: np.ndarray) -> np.ndarray:
    n = banded.shape[1]
    q = np.diag(banded[1])
    q[np.arange(n - 1), np.arange(1, n)] = banded[0, 1:]
    q[np.arange(1, n), np.arange(n - 1)] = banded[0, 1:]
    return q


class TestChainProtocol:
    def test_retained_draw_count(self, micro_sites, micro_spec, priors, short_sampler):
        draws = run_chain(micro_sites, micro_spec, priors, short_sampler)
        assert len(draws) == 10
        assert draws.iterations == list(range(54, 100, 5))
        assert draws.log_joint.shape == (10,)
        assert np.all(np.isfinite(draws.log_joint))

    def test_same_seed_same_chain(self, micro_sites, micro_spec, priors, short_sampler):
        first = run_chain(micro_sites, micro_spec, priors, short_sampler)
        second = run_chain(micro_sites, micro_spec, priors, short_sampler)
        for a, b in zip(first.states, second.states):
            np.testing.assert_array_equal(a.theta, b.theta)
            assert a.tau2 == b.tau2
            assert a.spatial_decay == b.spatial_decay

    def test_sites_are_put_in_canonical_order(self, micro_sites, micro_spec, priors, short_sampler):
        draws = run_chain(list(reversed(micro_sites)), micro_spec, priors, short_sampler)
        assert draws.site_ids == ("s01", "s02", "s03")

    def test_zero_step_keeps_decays_fixed(self, micro_sites, micro_spec, priors):
        config = SamplerConfig(total_iterations=60, burn_in=20, thin=2, seed=3, initial_step=0.0)
        draws = run_chain(micro_sites, micro_spec, priors, config)
        assert {s.spatial_decay for s in draws.states} == {1.0}
        assert {s.ar_decay for s in draws.states} == {1.0}
        assert draws.acceptance_rates() == {"spatial_decay": 1.0, "ar_decay": 1.0}

    def test_ablation_keeps_delta_at_zero(self, micro_sites, micro_spec, priors, short_sampler):
        config = short_sampler.model_copy(update={"include_random_effect": False})
        draws = run_chain(micro_sites, micro_spec, priors, config)
        assert all(np.all(d == 0.0) for s in draws.states for d in s.delta)
        assert {s.nu2 for s in draws.states} == {1.0}
        assert "ar_decay" not in draws.acceptance

    def test_everything_masked_is_rejected(self, micro_sites, micro_spec, priors, short_sampler):
        masked = [s.with_mask(np.ones(s.n, dtype=bool)) for s in micro_sites]
        with pytest.raises(InputError):
            run_chain(masked, micro_spec, priors, short_sampler)

    def test_numerical_failure_reports_iteration_and_block(
        self, micro_sites, micro_spec, priors, short_sampler, monkeypatch
    ):
        def broken(*args, **kwargs):
            raise NumericalError("singular", block="theta")

        monkeypatch.setattr(sampler_module, "update_theta", broken)
        with pytest.raises(NumericalError) as info:
            run_chain(micro_sites, micro_spec, priors, short_sampler)
        assert info.value.iteration == 0
        assert info.value.block == "theta"
        assert info.value.details["iteration"] == 0

    def test_initial_state(self, micro_sites, micro_spec, priors, short_sampler):
        model = ModelData.build(micro_sites, micro_spec)
        state = MetropolisWithinGibbs(model, priors, short_sampler).initial_state()
        for j, site in enumerate(micro_sites):
            basis = design_matrix(micro_spec, site.times).values
            expected, *_ = np.linalg.lstsq(basis, site.values, rcond=None)
            np.testing.assert_allclose(state.theta[:, j], expected, atol=1e-4)
        assert all(np.all(d == 0.0) for d in state.delta)
        assert (state.tau2, state.nu2, state.kappa2, state.spatial_decay, state.ar_decay) == (1.0,) * 5

    def test_progress_sink(self, micro_sites, micro_spec, priors, short_sampler):
        seen = []
        run_chain(micro_sites, micro_spec, priors, short_sampler, progress=lambda i, total: seen.append((i, total)))
        assert seen[0] == (1, 100) and seen[-1] == (100, 100)


class TestThetaConditional:
    def test_scalar_conjugate_case(self):
        site = SiteSeries("a", (0.0, 0.0), [0.0, 1.0, 2.0, 3.0], [1.0, 2.5, 0.5, 3.0])
        spec = BasisSpec(0, (0.0, 3.0))
        model = ModelData.build([site], spec)
        state = make_state([site], degree=0)
        factor = correlation_factor(KernelFamily.GAUSSIAN, state.spatial_decay, model.coords)

        mean, lower = theta_conditional(state, model, factor, 0)
        r_inv = factor.inverse[0, 0]
        precision = r_inv / state.kappa2 + 4.0 / state.tau2
        linear = np.sum(site.values - state.delta[0]) / state.tau2 + state.mu_theta[0] * r_inv / state.kappa2
        assert lower[0, 0] ** 2 == pytest.approx(precision, rel=1e-12)
        assert mean[0] == pytest.approx(linear / precision, rel=1e-12)

    def test_vanishing_noise_gives_least_squares(self):
        rng = np.random.default_rng(4)
        times = np.sort(rng.uniform(0.0, 1.0, 20))
        site = SiteSeries("a", (0.0, 0.0), times, 1.0 + 2.0 * times + 0.1 * rng.standard_normal(20))
        spec = BasisSpec(1, (0.0, 1.0))
        model = ModelData.build([site], spec)
        state = make_state([site], degree=1)
        state.delta = [np.zeros(20)]
        state.tau2, state.kappa2 = 1e-10, 1.0
        factor = correlation_factor(KernelFamily.GAUSSIAN, 1.0, model.coords)

        basis = design_matrix(spec, times).values
        expected, *_ = np.linalg.lstsq(basis, site.values, rcond=None)
        first, _ = theta_conditional(state, model, factor, 0)
        state.theta[0] = expected[0]
        second, _ = theta_conditional(state, model, factor, 1)
        np.testing.assert_allclose(second, [expected[1]], atol=1e-6)
        assert first.shape == (1,)

    def test_all_masked_returns_prior(self, micro_sites, micro_spec, micro_state):
        masked = [s.with_mask(np.ones(s.n, dtype=bool)) for s in micro_sites]
        model = ModelData.build(masked, micro_spec)
        factor = correlation_factor(KernelFamily.GAUSSIAN, micro_state.spatial_decay, model.coords)
        mean, lower = theta_conditional(micro_state, model, factor, 1)
        np.testing.assert_allclose(mean, micro_state.mu_theta[1], rtol=1e-9)
        np.testing.assert_allclose(lower @ lower.T, factor.inverse / micro_state.kappa2, rtol=1e-9, atol=1e-12)


class TestDeltaConditional:
    def test_two_point_chain_matches_dense_solve(self):
        site = SiteSeries("a", (0.0, 0.0), [0.0, 0.8], [1.0, 2.0])
        spec = BasisSpec(1, (0.0, 0.8))
        model = ModelData.build([site], spec)
        state = make_state([site], degree=1)
        banded, linear = delta_conditional(state, model, 0)
        q = dense_precision(banded)

        phi = np.exp(-state.ar_decay * 0.8)
        expected = np.array([[1 + phi**2, -phi], [-phi, 1.0]]) / state.nu2 + np.eye(2) / state.tau2
        np.testing.assert_allclose(q, expected, rtol=1e-14)

        z = np.random.default_rng(0).standard_normal(2)
        draw = sample_banded_gaussian(banded, linear, np.random.default_rng(0))
        upper = cholesky(q, lower=False)
        dense = np.linalg.solve(q, linear) + solve_triangular(upper, z, lower=False)
        np.testing.assert_allclose(draw, dense, rtol=1e-12, atol=1e-14)

    def test_all_masked_chain_has_ar_prior_covariance(self):
        times = np.array([0.0, 0.5, 1.5, 1.7, 3.0])
        site = SiteSeries("a", (0.0, 0.0), times, np.full(5, np.nan))
        model = ModelData.build([site], BasisSpec(1, (0.0, 3.0)))
        state = make_state([site], degree=1)
        banded, linear = delta_conditional(state, model, 0)
        np.testing.assert_array_equal(linear, np.zeros(5))

        phi = np.exp(-state.ar_decay * np.diff(times))
        transform = np.eye(5)
        transform[np.arange(1, 5), np.arange(4)] = -phi
        inverse = np.linalg.inv(transform)
        covariance = state.nu2 * inverse @ inverse.T
        np.testing.assert_allclose(np.linalg.inv(dense_precision(banded)), covariance, rtol=1e-10)

    def test_update_delta_draws_every_site(self, micro_sites, micro_spec, micro_state):
        model = ModelData.build(micro_sites, micro_spec)
        chains = update_delta(micro_state, model, np.random.default_rng(4))
        assert [c.size for c in chains] == [s.n for s in micro_sites]

        rng = np.random.default_rng(4)
        first = sample_banded_gaussian(*delta_conditional(micro_state, model, 0), rng)
        np.testing.assert_array_equal(chains[0], first)


class TestConjugateUpdates:
    @pytest.fixture
    def frozen(self):
        sites = make_sites(m=3, n=5, seed=21)
        model = ModelData.build(sites, BasisSpec(1, (0.0, 5.0)))
        state = make_state(sites, degree=1, seed=8)
        factor = correlation_factor(KernelFamily.GAUSSIAN, state.spatial_decay, model.coords)
        return model, state, factor

    def test_zero_residual_leaves_prior_scale(self, frozen, priors):
        model, state, _ = frozen
        fitted = [
            SiteSeries(d.series.site_id, d.series.coords, d.series.times, d.basis @ state.theta[:, j] + state.delta[j])
            for j, d in enumerate(model.sites)
        ]
        exact = ModelData.build(fitted, model.spec)
        shape, scale = tau2_conditional(state, exact, priors)
        assert shape == priors.tau2_shape + 15 / 2.0
        assert scale == pytest.approx(priors.tau2_scale, abs=1e-24)

    def test_variance_draws_follow_closed_form(self, frozen, priors):
        model, state, factor = frozen
        rng = np.random.default_rng(99)
        draws = np.array([update_variances(state, model, factor, priors, rng)[:2] for _ in range(20_000)])
        tau2_shape, tau2_scale = tau2_conditional(state, model, priors)
        nu2_shape, nu2_scale = nu2_conditional(state, model, priors)
        assert kstest(draws[:, 0], invgamma(tau2_shape, scale=tau2_scale).cdf).pvalue > 0.01
        assert kstest(draws[:, 1], invgamma(nu2_shape, scale=nu2_scale).cdf).pvalue > 0.01

    def test_kappa2_draws_follow_their_conditional(self, frozen, priors):
        model, state, factor = frozen
        rng = np.random.default_rng(31)
        levels = []
        for _ in range(10_000):
            _, _, kappa2, mu_theta = update_variances(state, model, factor, priors, rng)
            given = state.copy()
            given.mu_theta = mu_theta
            shape, scale = kappa2_conditional(given, factor, priors)
            levels.append(invgamma.cdf(kappa2, shape, scale=scale))
        assert kstest(levels, "uniform").pvalue > 0.01

    def test_mu_theta_draws_follow_closed_form(self, frozen, priors):
        model, state, factor = frozen
        rng = np.random.default_rng(5)
        draws = np.array([update_variances(state, model, factor, priors, rng)[3] for _ in range(20_000)])
        means, variance = mu_theta_conditional(state, factor, priors)
        se = np.sqrt(variance / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - means) < 4 * se)
        np.testing.assert_allclose(draws.var(axis=0), variance, rtol=0.05)

    def test_mu_theta_conditional_closed_form(self, frozen, priors):
        _, state, factor = frozen
        ones = np.ones(3)
        precision = 1.0 / priors.mu_variance + ones @ factor.inverse @ ones / state.kappa2
        expected = (state.theta @ factor.inverse @ ones / state.kappa2) / precision
        means, variance = mu_theta_conditional(state, factor, priors)
        assert variance == pytest.approx(1.0 / precision)
        np.testing.assert_allclose(means, expected, rtol=1e-12)


class TestMetropolis:
    def test_adaptation_raises_step_when_accepting_everything(self):
        step = MetropolisStep("spatial_decay", 0.5, target=0.44, window=50)
        for _ in range(50):
            step.record(True, adapting=True)
        assert step.step == pytest.approx(0.5 * np.exp(0.5 * 0.56))
        step.record(False, adapting=False)
        assert step.acceptance_rate == 0.0

    def test_no_adaptation_after_burn_in(self):
        step = MetropolisStep("ar_decay", 0.5)
        for _ in range(200):
            step.record(False, adapting=False)
        assert step.step == 0.5

    def test_zero_step_returns_current(self):
        value, accepted = metropolis_log_step(2.0, lambda x: -np.inf, 0.0, np.random.default_rng(0))
        assert (value, accepted) == (2.0, True)

    def test_update_decays_with_zero_steps(self, micro_sites, micro_spec, micro_state, priors):
        model = ModelData.build(micro_sites, micro_spec)
        steps = (MetropolisStep("spatial_decay", 0.0), MetropolisStep("ar_decay", 0.0))
        decays = update_decays(micro_state, model, priors, steps, np.random.default_rng(0), KernelFactorCache())
        assert decays == (micro_state.spatial_decay, micro_state.ar_decay)
        assert [s.proposed for s in steps] == [1, 1]

    def test_update_decays_skips_ar_decay_without_random_effect(self, micro_sites, micro_spec, micro_state, priors):
        model = ModelData.build(micro_sites, micro_spec)
        steps = (MetropolisStep("spatial_decay", 0.5), MetropolisStep("ar_decay", 0.5))
        rng = np.random.default_rng(0)
        _, ar_decay = update_decays(
            micro_state, model, priors, steps, rng, KernelFactorCache(), include_random_effect=False
        )
        assert ar_decay == micro_state.ar_decay
        assert steps[1].proposed == 0

    def test_prior_only_target_recovers_inverse_gamma(self):
        rng = np.random.default_rng(17)
        target = invgamma(2.0, scale=1.0)
        value, trace = 1.0, np.empty(40_000)
        for k in range(trace.size):
            value, _ = metropolis_log_step(value, target.logpdf, 1.0, rng)
            trace[k] = value
        quantiles = np.quantile(trace, [0.25, 0.5, 0.75])
        np.testing.assert_allclose(quantiles, target.ppf([0.25, 0.5, 0.75]), rtol=0.1)


def test_impute_missing_covers_every_masked_point(micro_sites, micro_spec, priors):
    masked = [micro_sites[0].with_mask(np.isin(np.arange(6), [1, 4]))] + micro_sites[1:]
    config = SamplerConfig(total_iterations=200, burn_in=100, thin=5, seed=2)
    draws = run_chain(masked, micro_spec, priors, config)
    imputed = impute_missing(draws, masked, rng=np.random.default_rng(0))
    assert [(v.site_id, v.index) for v in imputed] == [("s01", 1), ("s01", 4)]
    for value in imputed:
        assert value.draws.shape == (20,)
        assert value.lower <= value.mean <= value.upper


def forward_state(sites, spec, priors, rng):
    """Parameters from the prior, then data from the likelihood"""
    coords = np.array([s.coords for s in sites])
    draw = {
        name: float(
            invgamma.rvs(getattr(priors, f"{key}_shape"), scale=getattr(priors, f"{key}_scale"), random_state=rng)
        )
        for name, key in [
            ("spatial_decay", "phi"),
            ("ar_decay", "eta"),
            ("tau2", "tau2"),
            ("nu2", "nu2"),
            ("kappa2", "kappa2"),
        ]
    }
    mu = priors.mu_mean + np.sqrt(priors.mu_variance) * rng.standard_normal(spec.size)
    covariance = kernel_matrix(SpatialKernel(KernelFamily.GAUSSIAN, draw["kappa2"], draw["spatial_decay"]), coords)
    lower = np.linalg.cholesky(covariance + 1e-9 * draw["kappa2"] * np.eye(len(sites)))
    theta = mu[:, None] + rng.standard_normal((spec.size, len(sites))) @ lower.T
    delta = [simulate_ar_chain(s.times, draw["ar_decay"], draw["nu2"], rng) for s in sites]
    state = ModelState(theta=theta, mu_theta=mu, delta=delta, **draw)
    return state, simulate_data(state, sites, spec, rng)


def simulate_data(state, sites, spec, rng):
    return [
        SiteSeries(
            s.site_id,
            s.coords,
            s.times,
            design_matrix(spec, s.times).values @ state.theta[:, j]
            + state.delta[j]
            + np.sqrt(state.tau2) * rng.standard_normal(s.n),
        )
        for j, s in enumerate(sites)
    ]


@pytest.mark.slow
def test_successive_conditional_simulation_matches_forward_simulation():
    shapes = {f"{key}_shape": 6.0 for key in ("phi", "eta", "tau2", "kappa2", "nu2")}
    scales = {f"{key}_scale": 5.0 for key in ("phi", "eta", "tau2", "kappa2", "nu2")}
    priors = PriorSpec(**shapes, **scales, mu_variance=1.0)
    sites = make_sites(m=3, n=6, seed=13)
    spec = BasisSpec(1, (0.0, 6.0))
    rng = np.random.default_rng(2718)
    count = 20_000
    names = ("tau2", "nu2", "kappa2", "spatial_decay", "ar_decay")

    forward = np.array([[getattr(forward_state(sites, spec, priors, rng)[0], n) for n in names] for _ in range(count)])

    state, data = forward_state(sites, spec, priors, rng)
    config = SamplerConfig(total_iterations=count + 1, burn_in=0, thin=1, seed=1, initial_step=0.8)
    gibbs = MetropolisWithinGibbs(ModelData.build(data, spec), priors, config, rng=rng)
    successive = np.empty((count, len(names)))
    for k in range(count):
        state = gibbs.sweep(state)
        gibbs.set_data(simulate_data(state, sites, spec, rng))
        successive[k] = [getattr(state, n) for n in names]

    for col, name in enumerate(names):
        ess = effective_sample_size(successive[:, col])
        se = np.sqrt(forward[:, col].var() / count + successive[:, col].var() / ess)
        z = (forward[:, col].mean() - successive[:, col].mean()) / se
        assert abs(z) < 4.0, f"{name}: z = {z:.2f}"


@pytest.mark.slow
def test_recovers_generating_parameters():
    rng = np.random.default_rng(31)
    sites = make_sites(m=6, n=80, seed=31, spacing=0.7)
    spec = BasisSpec(3, (0.0, 80.0))
    truth = make_state(sites, degree=3, seed=32)
    truth.tau2, truth.nu2, truth.ar_decay = 0.05, 0.05, 0.5
    truth.delta = [simulate_ar_chain(s.times, truth.ar_decay, truth.nu2, rng) for s in sites]
    data = simulate_data(truth, sites, spec, rng)

    config = SamplerConfig(total_iterations=4_000, burn_in=1_000, thin=3, seed=4)
    draws = run_chain(data, spec, PriorSpec(), config)
    fitted = draws.posterior_mean()
    for j, s in enumerate(sites):
        basis = design_matrix(spec, s.times).values
        error = basis @ fitted.theta[:, j] + fitted.delta[j] - (basis @ truth.theta[:, j] + truth.delta[j])
        assert np.sqrt(np.mean(error**2)) < 0.3


@pytest.mark.slow
def test_adapted_acceptance_rates_on_synthetic_fit():
    plan = McPlan(replicates=1, n_sites=8, points_per_curve=60, master_seed=41)
    replicate = generate_study1(plan, GapScheme())[0]
    spec = BasisSpec.from_bases(4, replicate.dataset.interval)
    config = SamplerConfig(total_iterations=6_000, burn_in=2_000, thin=10, seed=42)
    rates = run_chain(replicate.dataset.sites, spec, PriorSpec(), config).acceptance_rates()
    assert set(rates) == {"spatial_decay", "ar_decay"}
    for name, rate in rates.items():
        assert 0.2 <= rate <= 0.6, f"{name}: {rate:.2f}"
