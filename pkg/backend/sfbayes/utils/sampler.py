"""
Metropolis-within-Gibbs sampler
Exact conditional draws for theta, delta, mu_theta and the variances;
adaptive log-scale random-walk Metropolis for the spatial and AR decays
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.linalg import LinAlgError
from scipy.linalg import (
    cho_solve,
    cho_solve_banded,
    cholesky,
    cholesky_banded,
    solve_banded,
    solve_triangular,
)
from scipy.stats import invgamma
from sklearn.linear_model import Ridge

from sfbayes.config import settings
from sfbayes.exceptions import InputError, NumericalError
from sfbayes.models.basis import BasisMatrix, BasisSpec, design_matrix
from sfbayes.models.density import (
    CorrelationFactor,
    KernelFactorCache,
    ar_coefficient,
    delta_prior_logpdf,
    model_log_joint_terms,
    theta_prior_logpdf,
)
from sfbayes.models.state import ModelData, ModelState, SiteSeries
from sfbayes.schemas import KernelFamily, PriorSpec, SamplerConfig
from sfbayes.utils.metrics import hpd

logger = logging.getLogger(__name__)

ProgressSink = Callable[[int, int], None]


# ---------------------------------------------------------------------------
# theta
# ---------------------------------------------------------------------------


def theta_conditional(
    state: ModelState, model: ModelData, factor: CorrelationFactor, r: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Full conditional of theta_r (an m-vector) given every other block

    Returns:
        Tuple of (conditional mean, lower Cholesky factor of the conditional precision)
    """
    m = model.n_sites
    precision_diag = np.zeros(m)
    linear = np.zeros(m)
    for j, site in enumerate(model.sites):
        obs = site.observed
        if not obs.any():
            continue
        basis = site.basis[obs]
        b_r = basis[:, r]
        partial = basis @ state.theta[:, j] - b_r * state.theta[r, j]
        resid = site.values[obs] - state.delta[j][obs] - partial
        precision_diag[j] = b_r @ b_r / state.tau2
        linear[j] = b_r @ resid / state.tau2

    prior_precision = factor.inverse / state.kappa2
    precision = prior_precision + np.diag(precision_diag)
    linear = linear + state.mu_theta[r] * factor.inverse.sum(axis=1) / state.kappa2
    try:
        lower = cholesky(precision, lower=True)
    except LinAlgError:
        raise NumericalError(f"Singular conditional precision for theta_{r}", block="theta")
    mean = cho_solve((lower, True), linear)
    return mean, lower


def update_theta(
    state: ModelState, model: ModelData, factor: CorrelationFactor, rng: np.random.Generator
) -> np.ndarray:
    """Gibbs draw of every theta_r block in turn, r = 0..p"""
    working = state.copy()
    for r in range(working.theta.shape[0]):
        mean, lower = theta_conditional(working, model, factor, r)
        z = rng.standard_normal(mean.size)
        working.theta[r] = mean + solve_triangular(lower.T, z, lower=False)
    return working.theta


# ---------------------------------------------------------------------------
# delta
# ---------------------------------------------------------------------------


def delta_conditional(state: ModelState, model: ModelData, j: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Banded precision and linear term of the delta chain at site j

    The AR(1) prior contributes a tridiagonal precision; unmasked points add
    1 / tau2 on the diagonal.

    Returns:
        Tuple of (upper banded precision of shape (2, n), linear term of shape (n,))
    """
    site = model.sites[j]
    n = site.gaps.size
    phi_next = ar_coefficient(state.ar_decay, site.gaps)[1:]
    diag = np.ones(n)
    diag[:-1] += phi_next**2
    diag /= state.nu2
    diag += site.observed / state.tau2

    banded = np.zeros((2, n))
    banded[1] = diag
    banded[0, 1:] = -phi_next / state.nu2

    resid = site.values - site.basis @ state.theta[:, j]
    linear = np.where(site.observed, resid, 0.0) / state.tau2
    return banded, linear


def sample_banded_gaussian(
    banded: np.ndarray, linear: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw from N(Q^-1 linear, Q^-1) for a tridiagonal SPD precision Q in upper banded form"""
    try:
        upper = cholesky_banded(banded, lower=False)
    except LinAlgError:
        raise NumericalError("Banded precision is not positive definite", block="delta")
    mean = cho_solve_banded((upper, False), linear)
    z = rng.standard_normal(linear.size)
    return mean + solve_banded((0, 1), upper, z)


def update_delta(state: ModelState, model: ModelData, rng: np.random.Generator) -> List[np.ndarray]:
    """Joint Gibbs draw of each site's delta chain"""
    chains = []
    for j in range(model.n_sites):
        banded, linear = delta_conditional(state, model, j)
        chains.append(sample_banded_gaussian(banded, linear, rng))
    return chains


# ---------------------------------------------------------------------------
# conjugate variance and mean updates
# ---------------------------------------------------------------------------


def _inverse_gamma(shape: float, scale: float, rng: np.random.Generator, block: str) -> float:
    if not scale > 0 or not np.isfinite(scale):
        raise NumericalError(f"Non-positive inverse-gamma scale {scale}", block=block)
    return float(invgamma.rvs(shape, scale=scale, random_state=rng))


def sum_squared_residuals(state: ModelState, model: ModelData) -> float:
    total = 0.0
    for j, site in enumerate(model.sites):
        obs = site.observed
        fitted = site.basis[obs] @ state.theta[:, j] + state.delta[j][obs]
        total += float(np.sum((site.values[obs] - fitted) ** 2))
    return total


def innovation_sum_of_squares(state: ModelState, model: ModelData) -> float:
    total = 0.0
    for j, site in enumerate(model.sites):
        delta = state.delta[j]
        phi = ar_coefficient(state.ar_decay, site.gaps)
        innovations = delta - np.concatenate(([0.0], phi[1:] * delta[:-1]))
        total += float(np.sum(innovations**2))
    return total


def tau2_conditional(state: ModelState, model: ModelData, priors: PriorSpec) -> Tuple[float, float]:
    """IG(a + N_obs / 2, b + SSR / 2)"""
    return (
        priors.tau2_shape + model.n_observed / 2.0,
        priors.tau2_scale + sum_squared_residuals(state, model) / 2.0,
    )


def nu2_conditional(state: ModelState, model: ModelData, priors: PriorSpec) -> Tuple[float, float]:
    return (
        priors.nu2_shape + model.n_points / 2.0,
        priors.nu2_scale + innovation_sum_of_squares(state, model) / 2.0,
    )


def kappa2_conditional(state: ModelState, factor: CorrelationFactor, priors: PriorSpec) -> Tuple[float, float]:
    n_rows, m = state.theta.shape
    resid = state.theta - state.mu_theta[:, None]
    quad = float(np.einsum("rm,mn,rn->", resid, factor.inverse, resid))
    return priors.kappa2_shape + m * n_rows / 2.0, priors.kappa2_scale + quad / 2.0


def mu_theta_conditional(
    state: ModelState, factor: CorrelationFactor, priors: PriorSpec
) -> Tuple[np.ndarray, float]:
    """Conditional means (one per r) and the shared conditional variance of mu_theta"""
    row_sums = factor.inverse.sum(axis=1)
    precision = 1.0 / priors.mu_variance + row_sums.sum() / state.kappa2
    means = (priors.mu_mean / priors.mu_variance + state.theta @ row_sums / state.kappa2) / precision
    return means, 1.0 / precision


def update_variances(
    state: ModelState,
    model: ModelData,
    factor: CorrelationFactor,
    priors: PriorSpec,
    rng: np.random.Generator,
    include_random_effect: bool = True,
) -> Tuple[float, float, float, np.ndarray]:
    """
    Conjugate draws in scan order mu_theta, tau2, nu2, kappa2

    Returns:
        Tuple of (tau2, nu2, kappa2, mu_theta)
    """
    working = state.copy()
    means, variance = mu_theta_conditional(working, factor, priors)
    working.mu_theta = means + np.sqrt(variance) * rng.standard_normal(means.size)

    working.tau2 = _inverse_gamma(*tau2_conditional(working, model, priors), rng, "tau2")
    if include_random_effect:
        working.nu2 = _inverse_gamma(*nu2_conditional(working, model, priors), rng, "nu2")
    working.kappa2 = _inverse_gamma(*kappa2_conditional(working, factor, priors), rng, "kappa2")
    return working.tau2, working.nu2, working.kappa2, working.mu_theta


# ---------------------------------------------------------------------------
# adaptive Metropolis for the decays
# ---------------------------------------------------------------------------


@dataclass
class MetropolisStep:
    """Random-walk step on the log scale with batch Robbins-Monro adaptation"""

    name: str
    step: float
    target: float = 0.44
    window: int = 50
    proposed: int = 0
    accepted: int = 0
    kept_proposed: int = 0
    kept_accepted: int = 0
    _batch_proposed: int = 0
    _batch_accepted: int = 0
    _batches: int = 0

    def record(self, accepted: bool, adapting: bool) -> None:
        self.proposed += 1
        self.accepted += int(accepted)
        if adapting:
            self._batch_proposed += 1
            self._batch_accepted += int(accepted)
            if self._batch_proposed >= self.window:
                self._adapt()
        else:
            self.kept_proposed += 1
            self.kept_accepted += int(accepted)

    def _adapt(self) -> None:
        self._batches += 1
        rate = self._batch_accepted / self._batch_proposed
        gain = min(0.5, 1.0 / np.sqrt(self._batches))
        self.step *= float(np.exp(gain * (rate - self.target)))
        self._batch_proposed = self._batch_accepted = 0

    @property
    def acceptance_rate(self) -> float:
        """Post-adaptation rate when available, overall rate otherwise"""
        if self.kept_proposed:
            return self.kept_accepted / self.kept_proposed
        return self.accepted / self.proposed if self.proposed else float("nan")

    def summary(self) -> Dict[str, float]:
        return {
            "accepted": self.accepted,
            "proposed": self.proposed,
            "rate": self.acceptance_rate,
            "step": self.step,
        }


def metropolis_log_step(
    current: float,
    log_target: Callable[[float], float],
    step: float,
    rng: np.random.Generator,
    current_log_target: Optional[float] = None,
) -> Tuple[float, bool]:
    """
    One random-walk Metropolis move on log(value) with Jacobian correction

    Returns:
        Tuple of (new value, accepted)
    """
    z = rng.standard_normal()
    log_u = np.log(rng.uniform())
    proposal = float(current * np.exp(step * z))
    if proposal == current:
        return current, True
    if current_log_target is None:
        current_log_target = log_target(current)
    log_ratio = log_target(proposal) + np.log(proposal) - current_log_target - np.log(current)
    if np.isfinite(log_ratio) and log_u < log_ratio:
        return proposal, True
    return current, False


def update_decays(
    state: ModelState,
    model: ModelData,
    priors: PriorSpec,
    steps: Tuple[MetropolisStep, MetropolisStep],
    rng: np.random.Generator,
    cache: KernelFactorCache,
    adapting: bool = False,
    include_random_effect: bool = True,
) -> Tuple[float, float]:
    """
    Metropolis updates of the spatial decay and the AR decay

    Only the log-joint terms that depend on each decay enter the ratio.

    Returns:
        Tuple of (spatial_decay, ar_decay)
    """
    phi_step, eta_step = steps

    def log_target_phi(value: float) -> float:
        factor = cache.get(model.kernel_family, value, model.coords)
        return theta_prior_logpdf(state.theta, state.mu_theta, state.kappa2, factor) + float(
            invgamma.logpdf(value, priors.phi_shape, scale=priors.phi_scale)
        )

    spatial_decay, accepted = metropolis_log_step(state.spatial_decay, log_target_phi, phi_step.step, rng)
    phi_step.record(accepted, adapting)

    ar_decay = state.ar_decay
    if include_random_effect:
        trial = state.copy()

        def log_target_eta(value: float) -> float:
            trial.ar_decay = value
            return delta_prior_logpdf(model, trial) + float(
                invgamma.logpdf(value, priors.eta_shape, scale=priors.eta_scale)
            )

        ar_decay, accepted = metropolis_log_step(state.ar_decay, log_target_eta, eta_step.step, rng)
        eta_step.record(accepted, adapting)
    return spatial_decay, ar_decay


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in chain"""

    states: List[ModelState]
    log_joint: np.ndarray
    acceptance: Dict[str, Dict[str, float]]
    spec: BasisSpec
    site_ids: Tuple[str, ...]
    coords: np.ndarray
    kernel_family: KernelFamily
    config: SamplerConfig
    priors: PriorSpec
    seed: int
    wall_time: float = 0.0
    iterations: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def acceptance_rates(self) -> Dict[str, float]:
        return {name: float(info["rate"]) for name, info in self.acceptance.items()}

    def scalar_series(self) -> Dict[str, np.ndarray]:
        """Per-parameter traces for diagnostics"""
        series = {
            name: np.array([getattr(s, name) for s in self.states])
            for name in ("tau2", "nu2", "kappa2", "spatial_decay", "ar_decay")
        }
        mu = np.array([s.mu_theta for s in self.states])
        for r in range(mu.shape[1]):
            series[f"mu_theta_{r}"] = mu[:, r]
        return series

    def to_frame(self, include_delta: bool = False) -> pd.DataFrame:
        """One row per retained draw, flat column naming theta_r_j"""
        rows = []
        for k, state in enumerate(self.states):
            row = {"draw": k, "log_joint": float(self.log_joint[k])}
            for r, value in enumerate(state.mu_theta):
                row[f"mu_theta_{r}"] = float(value)
            for r in range(state.theta.shape[0]):
                for j in range(state.theta.shape[1]):
                    row[f"theta_{r}_{j}"] = float(state.theta[r, j])
            for name in ("tau2", "nu2", "kappa2", "spatial_decay", "ar_decay"):
                row[name] = float(getattr(state, name))
            if include_delta:
                for j, chain in enumerate(state.delta):
                    for i, value in enumerate(chain):
                        row[f"delta_{j}_{i}"] = float(value)
            rows.append(row)
        return pd.DataFrame(rows)

    def posterior_mean(self) -> ModelState:
        """Posterior means used as point estimators"""
        if not self.states:
            raise InputError("No retained draws")
        first = self.states[0]
        delta = [np.mean([s.delta[j] for s in self.states], axis=0) for j in range(len(first.delta))]
        return ModelState(
            theta=np.mean([s.theta for s in self.states], axis=0),
            mu_theta=np.mean([s.mu_theta for s in self.states], axis=0),
            delta=delta,
            tau2=float(np.mean([s.tau2 for s in self.states])),
            nu2=float(np.mean([s.nu2 for s in self.states])),
            kappa2=float(np.mean([s.kappa2 for s in self.states])),
            spatial_decay=float(np.mean([s.spatial_decay for s in self.states])),
            ar_decay=float(np.mean([s.ar_decay for s in self.states])),
        )


class MetropolisWithinGibbs:
    """
    Single-chain sampler with fixed scan order
    theta, delta, mu_theta, tau2, nu2, kappa2, spatial decay, AR decay
    """

    def __init__(
        self,
        model: ModelData,
        priors: PriorSpec,
        config: SamplerConfig,
        rng: Optional[np.random.Generator] = None,
        cache: Optional[KernelFactorCache] = None,
    ):
        self.model = model
        self.priors = priors
        self.config = config
        self.seed = config.seed if config.seed is not None else settings.DEFAULT_SEED
        self.rng = rng if rng is not None else np.random.default_rng(self.seed)
        self.cache = cache if cache is not None else KernelFactorCache()
        self.include_random_effect = config.include_random_effect
        self.phi_step = MetropolisStep(
            "spatial_decay", config.initial_step, config.target_acceptance, config.adaptation_window
        )
        self.eta_step = MetropolisStep(
            "ar_decay", config.initial_step, config.target_acceptance, config.adaptation_window
        )
        self._block = "init"

    def set_data(self, data: Sequence[SiteSeries]) -> None:
        """Swap observed values while keeping the basis family"""
        self.model = ModelData.build(data, self.model.spec, self.model.kernel_family)

    def factor(self, state: ModelState) -> CorrelationFactor:
        return self.cache.get(self.model.kernel_family, state.spatial_decay, self.model.coords)

    def initial_state(self) -> ModelState:
        """Per-site ridge least squares for theta; delta at zero; unit variances and decays"""
        p1 = self.model.spec.size
        theta = np.full((p1, self.model.n_sites), np.nan)
        for j, site in enumerate(self.model.sites):
            obs = site.observed
            if obs.any():
                ridge = Ridge(alpha=1e-6, fit_intercept=False)
                ridge.fit(site.basis[obs], site.values[obs])
                theta[:, j] = ridge.coef_
        fitted = ~np.isnan(theta[0])
        fill = theta[:, fitted].mean(axis=1) if fitted.any() else np.zeros(p1)
        theta[:, ~fitted] = fill[:, None]
        return ModelState(
            theta=theta,
            mu_theta=theta.mean(axis=1),
            delta=[np.zeros(site.gaps.size) for site in self.model.sites],
            tau2=1.0,
            nu2=1.0,
            kappa2=1.0,
            spatial_decay=1.0,
            ar_decay=1.0,
        )

    def sweep(self, state: ModelState, adapting: bool = False) -> ModelState:
        """One full scan over all blocks"""
        state = state.copy()
        factor = self.factor(state)

        self._block = "theta"
        state.theta = update_theta(state, self.model, factor, self.rng)

        if self.include_random_effect:
            self._block = "delta"
            state.delta = update_delta(state, self.model, self.rng)

        self._block = "variances"
        state.tau2, state.nu2, state.kappa2, state.mu_theta = update_variances(
            state, self.model, factor, self.priors, self.rng, self.include_random_effect
        )

        self._block = "decays"
        state.spatial_decay, state.ar_decay = update_decays(
            state,
            self.model,
            self.priors,
            (self.phi_step, self.eta_step),
            self.rng,
            self.cache,
            adapting=adapting,
            include_random_effect=self.include_random_effect,
        )
        return state

    def log_joint(self, state: ModelState) -> float:
        return model_log_joint_terms(
            self.model,
            state,
            self.priors,
            factor=self.factor(state),
            include_random_effect=self.include_random_effect,
        ).total

    def run(self, state: Optional[ModelState] = None, progress: Optional[ProgressSink] = None) -> PosteriorDraws:
        config = self.config
        state = state if state is not None else self.initial_state()
        states, log_joints, iterations = [], [], []
        started = time.perf_counter()

        logger.info(
            f"Starting chain: {config.total_iterations} iterations, burn-in {config.burn_in}, "
            f"thin {config.thin}, {self.model.n_sites} sites, {self.model.spec.size} bases"
        )
        for iteration in range(config.total_iterations):
            adapting = iteration < config.burn_in
            try:
                state = self.sweep(state, adapting=adapting)
                kept = not adapting and (iteration - config.burn_in + 1) % config.thin == 0
                if kept:
                    states.append(state)
                    log_joints.append(self.log_joint(state))
                    iterations.append(iteration)
            except NumericalError as e:
                block = e.block or self._block
                logger.error(f"Numerical failure at iteration {iteration} in block {block}: {e.message}")
                raise NumericalError(
                    f"{e.message} (iteration {iteration}, block {block})",
                    details=e.details,
                    iteration=iteration,
                    block=block,
                )
            if progress is not None:
                progress(iteration + 1, config.total_iterations)
            if (iteration + 1) % settings.PROGRESS_EVERY == 0:
                logger.info(
                    f"Iteration {iteration + 1}/{config.total_iterations}; "
                    f"acceptance phi={self.phi_step.acceptance_rate:.2f} eta={self.eta_step.acceptance_rate:.2f}"
                )

        wall_time = time.perf_counter() - started
        acceptance = {"spatial_decay": self.phi_step.summary()}
        if self.include_random_effect:
            acceptance["ar_decay"] = self.eta_step.summary()
        logger.info(f"Chain finished in {wall_time:.1f}s with {len(states)} retained draws")
        return PosteriorDraws(
            states=states,
            log_joint=np.array(log_joints),
            acceptance=acceptance,
            spec=self.model.spec,
            site_ids=self.model.site_ids,
            coords=self.model.coords.copy(),
            kernel_family=self.model.kernel_family,
            config=config,
            priors=self.priors,
            seed=self.seed,
            wall_time=wall_time,
            iterations=iterations,
        )


def canonical_order(data: Sequence[SiteSeries]) -> List[SiteSeries]:
    """Sites ordered by site_id"""
    return sorted(data, key=lambda s: s.site_id)


def run_chain(
    data: Sequence[SiteSeries],
    spec: BasisSpec,
    priors: PriorSpec,
    config: SamplerConfig,
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN,
    rng: Optional[np.random.Generator] = None,
    progress: Optional[ProgressSink] = None,
) -> PosteriorDraws:
    """
    Fit the hierarchical model with one Metropolis-within-Gibbs chain

    Args:
        data: Observed curves (any order; sites are put in canonical order)
        spec: Bernstein basis shared by every curve
        priors: Prior hyperparameters
        config: Chain protocol
        kernel_family: Covariance family of the coefficient field
        rng: Optional generator; defaults to one seeded from config.seed
        progress: Optional sink called with (iteration, total)

    Returns:
        PosteriorDraws with floor((total - burn_in) / thin) retained states
    """
    data = canonical_order(data)
    if sum(s.n_observed for s in data) == 0:
        raise InputError("At least one unmasked observation is required to fit")
    model = ModelData.build(data, spec, kernel_family)
    sampler = MetropolisWithinGibbs(model, priors, config, rng=rng)
    return sampler.run(progress=progress)


@dataclass(frozen=True)
class ImputedValue:
    """Posterior predictive draws for one masked observation slot"""

    site_id: str
    index: int
    t: float
    draws: np.ndarray
    mean: float
    lower: float
    upper: float


def impute_missing(
    draws: PosteriorDraws,
    data: Sequence[SiteSeries],
    basis: Optional[Sequence[BasisMatrix]] = None,
    rng: Optional[np.random.Generator] = None,
    mass: float = 0.95,
) -> List[ImputedValue]:
    """
    Predictive draws y* ~ N(sum_r theta_rj b_r + delta_ij, tau2) at every masked point

    Args:
        draws: Retained posterior states (with delta chains)
        data: The fitted curves, masks included
        basis: Optional design matrices, one per site
        rng: Generator for the observation noise
        mass: HPD mass of the summaries

    Returns:
        One ImputedValue per masked point, in site then time order
    """
    if len(draws) == 0:
        raise InputError("impute_missing needs at least one draw")
    data = canonical_order(data)
    if tuple(s.site_id for s in data) != tuple(draws.site_ids):
        raise InputError("Data sites do not match the fitted sites")
    if basis is None:
        basis = [design_matrix(draws.spec, s.times) for s in data]
    rng = rng if rng is not None else np.random.default_rng(draws.seed)

    results = []
    for j, (series, matrix) in enumerate(zip(data, basis)):
        masked = np.flatnonzero(series.missing)
        if masked.size == 0:
            continue
        rows = np.asarray(matrix, dtype=float)[masked]
        samples = np.empty((len(draws), masked.size))
        for k, state in enumerate(draws.states):
            if state.delta[j].shape != series.times.shape:
                raise InputError("Draws carry no delta chains for these sites; refit with full delta storage")
            mean = rows @ state.theta[:, j] + state.delta[j][masked]
            samples[k] = mean + np.sqrt(state.tau2) * rng.standard_normal(masked.size)
        use_hpd = len(draws) >= 10
        for col, index in enumerate(masked):
            column = samples[:, col]
            if use_hpd:
                interval = hpd(column, mass)
                lower, upper = interval.lower, interval.upper
            else:
                lower, upper = float(column.min()), float(column.max())
            results.append(
                ImputedValue(
                    site_id=series.site_id,
                    index=int(index),
                    t=float(series.times[index]),
                    draws=column,
                    mean=float(column.mean()),
                    lower=lower,
                    upper=upper,
                )
            )
    return results
