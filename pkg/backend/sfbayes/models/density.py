"""
Log-density of the hierarchical model
Single source of truth for the sampler's accept/reject decisions and for diagnostics
"""

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.stats import invgamma, norm
from sklearn.metrics.pairwise import euclidean_distances
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from sfbayes.config import settings
from sfbayes.exceptions import DomainError, NumericalError
from sfbayes.models.basis import BasisMatrix
from sfbayes.models.state import ModelData, ModelState, SiteSeries, SpatialKernel
from sfbayes.schemas import KernelFamily, PriorSpec

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def ar_coefficient(ar_decay: float, gap):
    """
    AR coefficient exp(-ar_decay * gap); 1 when the gap is zero

    Accepts scalars or arrays of gaps.
    """
    if not np.isfinite(ar_decay) or ar_decay <= 0:
        raise DomainError(f"ar_decay must be positive, got {ar_decay}")
    gap_array = np.asarray(gap, dtype=float)
    if np.any(~np.isfinite(gap_array)) or np.any(gap_array < 0):
        raise DomainError("gaps must be finite and non-negative")
    result = np.exp(-ar_decay * gap_array)
    return float(result) if result.ndim == 0 else result


def pairwise_distances(coords, other=None) -> np.ndarray:
    """Euclidean distances between site coordinates, units as supplied"""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    other = coords if other is None else np.atleast_2d(np.asarray(other, dtype=float))
    return euclidean_distances(coords, other)


def kernel_matrix(kernel: SpatialKernel, coords) -> np.ndarray:
    """
    Covariance matrix with entry (j, j*) = C(||s_j - s_j*||)

    Args:
        kernel: Kernel family, variance and decay
        coords: (m, 2) site coordinates

    Returns:
        Symmetric (m, m) matrix with kappa^2 on the diagonal (no jitter)
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if coords.shape[0] < 1 or np.any(~np.isfinite(coords)):
        raise DomainError("kernel_matrix needs at least one finite coordinate")
    return kernel.covariance(pairwise_distances(coords))


def cholesky_with_jitter(matrix: np.ndarray, scale: float = 1.0) -> Tuple[np.ndarray, float]:
    """
    Lower Cholesky factor of matrix + jitter * I

    Starts at KERNEL_JITTER * scale and doubles the jitter on every failure,
    up to MAX_JITTER_DOUBLINGS times.

    Returns:
        Tuple of (lower factor, jitter used)
    """
    matrix = np.asarray(matrix, dtype=float)
    if np.any(~np.isfinite(matrix)):
        raise NumericalError("Non-finite entries in matrix passed to Cholesky")
    eye = np.eye(matrix.shape[0])
    base = settings.KERNEL_JITTER * scale
    lower, jitter = None, base
    try:
        for attempt in Retrying(
            stop=stop_after_attempt(settings.MAX_JITTER_DOUBLINGS + 1),
            retry=retry_if_exception_type(LinAlgError),
        ):
            with attempt:
                number = attempt.retry_state.attempt_number
                jitter = base * 2 ** (number - 1)
                if number > 1:
                    logger.warning(f"Cholesky failed, retrying with jitter {jitter:.3e}")
                lower = cholesky(matrix + jitter * eye, lower=True)
    except RetryError:
        min_eig = float(np.linalg.eigvalsh((matrix + matrix.T) / 2).min())
        raise NumericalError(
            "Cholesky factorisation failed after maximum jitter",
            details={"min_eigenvalue": min_eig, "jitter": jitter, "size": matrix.shape[0]},
        )
    return lower, jitter


@dataclass(frozen=True)
class CorrelationFactor:
    """Factorised spatial correlation matrix R (Sigma_m = kappa^2 R)"""

    lower: np.ndarray
    inverse: np.ndarray
    logdet: float
    jitter: float

    @property
    def size(self) -> int:
        return self.lower.shape[0]

    @classmethod
    def from_matrix(cls, correlation: np.ndarray) -> "CorrelationFactor":
        lower, jitter = cholesky_with_jitter(correlation, scale=1.0)
        inverse = cho_solve((lower, True), np.eye(lower.shape[0]))
        logdet = 2.0 * float(np.log(np.diag(lower)).sum())
        return cls(lower=lower, inverse=inverse, logdet=logdet, jitter=jitter)


def correlation_factor(family: KernelFamily, decay: float, coords) -> CorrelationFactor:
    kernel = SpatialKernel(family=family, variance=1.0, decay=decay)
    return CorrelationFactor.from_matrix(kernel_matrix(kernel, coords))


class KernelFactorCache:
    """
    Bounded LRU cache of correlation factors keyed by (family, decay, coords)

    Lookups and inserts hold the lock; factorisation on a miss runs outside it.
    """

    def __init__(self, max_size: Optional[int] = None):
        self.max_size = max_size or settings.FACTOR_CACHE_SIZE
        self._entries: "OrderedDict[tuple, CorrelationFactor]" = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def _key(family: KernelFamily, decay: float, coords: np.ndarray) -> tuple:
        coords = np.ascontiguousarray(coords, dtype=float)
        return (KernelFamily(family).value, float(decay), coords.shape, coords.tobytes())

    def get(self, family: KernelFamily, decay: float, coords) -> CorrelationFactor:
        key = self._key(family, decay, coords)
        with self._lock:
            factor = self._entries.get(key)
            if factor is not None:
                self._entries.move_to_end(key)
                return factor
        factor = correlation_factor(family, decay, coords)
        with self._lock:
            factor = self._entries.setdefault(key, factor)
            self._entries.move_to_end(key)
            while len(self._entries) > self.max_size:
                self._entries.popitem(last=False)
        return factor

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def inverse_gamma_moments(shape: float, scale: float) -> Tuple[float, float]:
    """Mean and variance of IG(shape, scale); inf where the moment does not exist"""
    mean = scale / (shape - 1.0) if shape > 1 else float("inf")
    variance = scale**2 / ((shape - 1.0) ** 2 * (shape - 2.0)) if shape > 2 else float("inf")
    return mean, variance


@dataclass(frozen=True)
class LogJointTerms:
    """The five additive term groups of the joint log-density"""

    likelihood: float
    theta_prior: float
    delta_prior: float
    mu_prior: float
    variance_prior: float

    @property
    def total(self) -> float:
        return self.likelihood + self.theta_prior + self.delta_prior + self.mu_prior + self.variance_prior


def site_means(model: ModelData, state: ModelState) -> list:
    """Fitted mean sum_r theta_rj b_r(t_ij) + delta_ij per site"""
    return [site.basis @ state.theta[:, j] + state.delta[j] for j, site in enumerate(model.sites)]


def likelihood_logpdf(model: ModelData, state: ModelState) -> float:
    sd = np.sqrt(state.tau2)
    total = 0.0
    for mean, site in zip(site_means(model, state), model.sites):
        obs = site.observed
        total += float(norm.logpdf(site.values[obs], loc=mean[obs], scale=sd).sum())
    return total


def theta_prior_logpdf(
    theta: np.ndarray, mu_theta: np.ndarray, kappa2: float, factor: CorrelationFactor
) -> float:
    """Sum over r of log N_m(theta_r | mu_r 1, kappa^2 R)"""
    n_rows, m = theta.shape
    resid = theta - mu_theta[:, None]
    z = solve_triangular(factor.lower, resid.T, lower=True)
    quad = float(np.sum(z**2)) / kappa2
    log_norm = m * LOG_2PI + m * np.log(kappa2) + factor.logdet
    return float(-0.5 * n_rows * log_norm - 0.5 * quad)


def delta_chain_logpdf(delta: np.ndarray, gaps: np.ndarray, ar_decay: float, nu2: float) -> float:
    """AR(1) log-density: delta_1 ~ N(0, nu2), delta_i | delta_(i-1) ~ N(phi_i delta_(i-1), nu2)"""
    phi = ar_coefficient(ar_decay, gaps)
    mean = np.concatenate(([0.0], phi[1:] * delta[:-1]))
    return float(norm.logpdf(delta, loc=mean, scale=np.sqrt(nu2)).sum())


def delta_prior_logpdf(model: ModelData, state: ModelState) -> float:
    return float(
        sum(
            delta_chain_logpdf(state.delta[j], site.gaps, state.ar_decay, state.nu2)
            for j, site in enumerate(model.sites)
        )
    )


def mu_prior_logpdf(mu_theta: np.ndarray, priors: PriorSpec) -> float:
    return float(norm.logpdf(mu_theta, loc=priors.mu_mean, scale=np.sqrt(priors.mu_variance)).sum())


def variance_prior_logpdf(state: ModelState, priors: PriorSpec, include_random_effect: bool = True) -> float:
    terms = [
        invgamma.logpdf(state.spatial_decay, priors.phi_shape, scale=priors.phi_scale),
        invgamma.logpdf(state.tau2, priors.tau2_shape, scale=priors.tau2_scale),
        invgamma.logpdf(state.kappa2, priors.kappa2_shape, scale=priors.kappa2_scale),
    ]
    if include_random_effect:
        terms.append(invgamma.logpdf(state.ar_decay, priors.eta_shape, scale=priors.eta_scale))
        terms.append(invgamma.logpdf(state.nu2, priors.nu2_shape, scale=priors.nu2_scale))
    return float(np.sum(terms))


def model_log_joint_terms(
    model: ModelData,
    state: ModelState,
    priors: PriorSpec,
    factor: Optional[CorrelationFactor] = None,
    include_random_effect: bool = True,
) -> LogJointTerms:
    state.validate()
    if factor is None:
        factor = correlation_factor(model.kernel_family, state.spatial_decay, model.coords)
    terms = LogJointTerms(
        likelihood=likelihood_logpdf(model, state),
        theta_prior=theta_prior_logpdf(state.theta, state.mu_theta, state.kappa2, factor),
        delta_prior=delta_prior_logpdf(model, state) if include_random_effect else 0.0,
        mu_prior=mu_prior_logpdf(state.mu_theta, priors),
        variance_prior=variance_prior_logpdf(state, priors, include_random_effect),
    )
    if not np.isfinite(terms.total):
        raise NumericalError("Joint log-density is not finite", details=terms.__dict__)
    return terms


def log_joint_terms(
    data: Sequence[SiteSeries],
    basis: Sequence[BasisMatrix],
    state: ModelState,
    priors: PriorSpec,
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN,
    include_random_effect: bool = True,
) -> LogJointTerms:
    """Term-by-term joint log-density of data and parameters"""
    spec = basis[0].spec if basis else None
    model = ModelData.build(data, spec, kernel_family, basis=basis)
    state.validate(data)
    return model_log_joint_terms(model, state, priors, include_random_effect=include_random_effect)


def log_joint(
    data: Sequence[SiteSeries],
    basis: Sequence[BasisMatrix],
    state: ModelState,
    priors: PriorSpec,
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN,
    include_random_effect: bool = True,
) -> float:
    """
    Exact joint log-density of data plus parameters

    Sums the Gaussian likelihood of unmasked observations, the multivariate
    normal prior of every theta_r row, the AR(1) prior of every delta chain,
    the normal priors on mu_theta and the inverse-gamma priors on the decays
    and variances.
    """
    return log_joint_terms(data, basis, state, priors, kernel_family, include_random_effect).total
