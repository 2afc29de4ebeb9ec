"""
Curve prediction at unmonitored coordinates
Kriging of the basis-coefficient field per posterior draw, then AR(1) and noise propagation
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular

from sfbayes.exceptions import InputError
from sfbayes.models.basis import BasisSpec, design_matrix
from sfbayes.models.density import (
    CorrelationFactor,
    KernelFactorCache,
    ar_coefficient,
    cholesky_with_jitter,
    pairwise_distances,
)
from sfbayes.models.state import ModelState, SpatialKernel
from sfbayes.schemas import KernelFamily, PredictionRequest, TargetSite
from sfbayes.utils.metrics import MIN_HPD_DRAWS, hpd_bounds
from sfbayes.utils.sampler import PosteriorDraws

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KrigingConditional:
    """Conditional law of theta at target sites: mean (p + 1, T) and shared covariance (T, T)"""

    mean: np.ndarray
    covariance: np.ndarray


def krige_conditional(
    draw: ModelState,
    obs_coords,
    target_coords,
    family: KernelFamily = KernelFamily.GAUSSIAN,
    factor: Optional[CorrelationFactor] = None,
) -> KrigingConditional:
    """
    Gaussian conditioning of each theta_r on its observed-site values

    mean_r = mu_r + R_to R_oo^-1 (theta_r,o - mu_r 1)
    cov    = kappa2 (R_tt - R_to R_oo^-1 R_ot), identical for every r
    """
    obs_coords = np.atleast_2d(np.asarray(obs_coords, dtype=float))
    target_coords = np.atleast_2d(np.asarray(target_coords, dtype=float))
    if np.any(~np.isfinite(target_coords)):
        raise InputError("Target coordinates must be finite")
    kernel = SpatialKernel(family=family, variance=1.0, decay=draw.spatial_decay)
    if factor is None:
        factor = CorrelationFactor.from_matrix(kernel.correlation(pairwise_distances(obs_coords)))
    cross = kernel.correlation(pairwise_distances(target_coords, obs_coords))  # (T, m)
    target = kernel.correlation(pairwise_distances(target_coords))  # (T, T)

    weights = cross @ factor.inverse  # (T, m)
    resid = draw.theta - draw.mu_theta[:, None]  # (p + 1, m)
    mean = draw.mu_theta[:, None] + resid @ weights.T
    covariance = draw.kappa2 * (target - weights @ cross.T)
    return KrigingConditional(mean=mean, covariance=(covariance + covariance.T) / 2.0)


def krige_theta(
    draw: ModelState,
    obs_coords,
    target_coords,
    rng: np.random.Generator,
    family: KernelFamily = KernelFamily.GAUSSIAN,
    factor: Optional[CorrelationFactor] = None,
) -> np.ndarray:
    """
    Draw theta at the target coordinates from its kriging conditional

    Returns:
        (p + 1, T) array of coefficients
    """
    conditional = krige_conditional(draw, obs_coords, target_coords, family, factor)
    lower, _ = cholesky_with_jitter(conditional.covariance, scale=draw.kappa2)
    z = rng.standard_normal(conditional.mean.shape)
    return conditional.mean + z @ lower.T


def simulate_ar_chain(
    times: np.ndarray, ar_decay: float, nu2: float, rng: np.random.Generator
) -> np.ndarray:
    """Forward AR(1): delta_1 ~ N(0, nu2), delta_i = phi_i delta_(i-1) + N(0, nu2)"""
    gaps = np.concatenate(([0.0], np.diff(times)))
    phi = ar_coefficient(ar_decay, gaps)
    innovations = np.sqrt(nu2) * rng.standard_normal(times.size)
    delta = np.empty(times.size)
    delta[0] = innovations[0]
    for i in range(1, times.size):
        delta[i] = phi[i] * delta[i - 1] + innovations[i]
    return delta


@dataclass
class PredictedCurve:
    """Pointwise posterior predictive summary at one target"""

    site_id: str
    coords: tuple
    times: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mass: float = 0.95
    samples: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "site_id": self.site_id,
                "t": self.times,
                "mean": self.mean,
                "hpd_lo": self.lower,
                "hpd_hi": self.upper,
            }
        )


def _summarise(samples: np.ndarray, mass: float):
    mean = samples.mean(axis=0)
    if samples.shape[0] >= MIN_HPD_DRAWS:
        lower, upper = hpd_bounds(samples, mass)
    else:
        logger.warning(f"Only {samples.shape[0]} draws; reporting min/max bands instead of HPD")
        lower, upper = samples.min(axis=0), samples.max(axis=0)
    # bands always contain the mean
    return mean, np.minimum(lower, mean), np.maximum(upper, mean)


def predict_curves(
    draws: PosteriorDraws,
    request: PredictionRequest,
    spec: Optional[BasisSpec] = None,
    rng: Optional[np.random.Generator] = None,
    cache: Optional[KernelFactorCache] = None,
) -> List[PredictedCurve]:
    """
    Posterior predictive curves at unmonitored sites

    Args:
        draws: Retained posterior states
        request: Target sites, their times and the noise flags
        spec: Basis family (defaults to the fitted one)
        rng: Generator for kriging, delta and noise draws
        cache: Optional shared correlation factor cache

    Returns:
        One PredictedCurve per target, in request order
    """
    if len(draws) == 0:
        raise InputError("predict_curves needs at least one draw")
    spec = spec or draws.spec
    rng = rng if rng is not None else np.random.default_rng(draws.seed)
    cache = cache or KernelFactorCache()
    targets: Sequence[TargetSite] = request.targets
    if any(not t.times for t in targets):
        raise InputError("Every target needs at least one time point")

    bases = [design_matrix(spec, t.times).values for t in targets]
    target_coords = np.array([(t.x, t.y) for t in targets], dtype=float)
    include_delta = request.include_delta and draws.config.include_random_effect
    if request.include_delta and not include_delta:
        logger.warning("Draws come from a fit without random effect; delta is not simulated")

    samples = [np.empty((len(draws), len(t.times))) for t in targets]
    for k, state in enumerate(draws.states):
        factor = cache.get(draws.kernel_family, state.spatial_decay, draws.coords)
        theta = krige_theta(state, draws.coords, target_coords, rng, draws.kernel_family, factor)
        for i, (target, basis) in enumerate(zip(targets, bases)):
            times = np.asarray(target.times, dtype=float)
            curve = basis @ theta[:, i]
            if include_delta:
                curve = curve + simulate_ar_chain(times, state.ar_decay, state.nu2, rng)
            if request.include_obs_noise:
                curve = curve + np.sqrt(state.tau2) * rng.standard_normal(times.size)
            samples[i][k] = curve

    curves = []
    for target, block in zip(targets, samples):
        mean, lower, upper = _summarise(block, request.mass)
        curves.append(
            PredictedCurve(
                site_id=target.site_id,
                coords=(target.x, target.y),
                times=np.asarray(target.times, dtype=float),
                mean=mean,
                lower=lower,
                upper=upper,
                mass=request.mass,
                samples=block if request.keep_samples else None,
            )
        )
    logger.info(f"Predicted {len(curves)} curves from {len(draws)} draws")
    return curves


def fitted_curve(
    draws: PosteriorDraws, site_index: int, times: Sequence[float], include_delta: bool = False
) -> np.ndarray:
    """
    Posterior mean curve at an observed site

    With include_delta the site's own times are required so delta lines up.
    """
    if len(draws) == 0:
        raise InputError("fitted_curve needs at least one draw")
    basis = design_matrix(draws.spec, times).values
    theta = np.mean([s.theta[:, site_index] for s in draws.states], axis=0)
    curve = basis @ theta
    if include_delta:
        chains = [s.delta[site_index] for s in draws.states]
        if chains[0].shape != (basis.shape[0],):
            raise InputError("include_delta needs the site's own observation times")
        curve = curve + np.mean(chains, axis=0)
    return curve


def uniform_target_times(spec: BasisSpec, count: int) -> List[float]:
    """count equally spaced times over the basis interval"""
    a, b = spec.interval
    return np.linspace(a, b, count).tolist()
