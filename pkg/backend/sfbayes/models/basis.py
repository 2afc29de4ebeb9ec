"""
Bernstein polynomial bases
Evaluation on arbitrary bounded intervals and design matrices for irregular abscissae
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy.linalg import lstsq
from scipy.special import comb, gammaln, xlog1py, xlogy

from sfbayes.config import settings
from sfbayes.exceptions import ConfigurationError, DomainError, InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BasisSpec:
    """Bernstein degree p over the interval [a, b]; p + 1 basis functions"""

    degree: int
    interval: Tuple[float, float]

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ConfigurationError(f"Basis degree must be a non-negative integer, got {self.degree}")
        a, b = (float(v) for v in self.interval)
        if not np.isfinite(a) or not np.isfinite(b) or not b - a > 0:
            raise ConfigurationError(f"Degenerate basis interval [{a}, {b}]")
        object.__setattr__(self, "degree", int(self.degree))
        object.__setattr__(self, "interval", (a, b))

    @property
    def size(self) -> int:
        return self.degree + 1

    @classmethod
    def from_bases(cls, n_bases: int, interval: Tuple[float, float]) -> "BasisSpec":
        """Spec with n_bases functions (degree n_bases - 1)"""
        return cls(degree=n_bases - 1, interval=interval)

    def rescale(self, t) -> np.ndarray:
        """Map t in [a, b] to x in [0, 1], clamping floating-point noise at the endpoints"""
        a, b = self.interval
        t = np.asarray(t, dtype=float)
        tol = settings.ENDPOINT_TOLERANCE
        if np.any(~np.isfinite(t)) or np.any(t < a - tol) or np.any(t > b + tol):
            raise DomainError(
                f"Evaluation point outside basis interval [{a}, {b}]",
                details={"min": float(np.min(t)), "max": float(np.max(t))},
            )
        x = (np.clip(t, a, b) - a) / (b - a)
        return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class BasisMatrix:
    """Design matrix: row i holds b_0^p(t_i), ..., b_p^p(t_i)"""

    spec: BasisSpec
    times: np.ndarray
    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _basis_values(spec: BasisSpec, x: np.ndarray) -> np.ndarray:
    """Closed-form basis values for rescaled abscissae x (shape n) -> (n, p + 1)"""
    p = spec.degree
    r = np.arange(p + 1)
    x = x[:, None]
    if p <= settings.EXACT_BINOMIAL_MAX_DEGREE:
        coefficients = np.array([comb(p, k, exact=True) for k in r], dtype=float)
        return coefficients * x**r * (1.0 - x) ** (p - r)
    # log-space for large degrees: log C(p, r) + r log x + (p - r) log(1 - x)
    log_coefficients = gammaln(p + 1) - gammaln(r + 1) - gammaln(p - r + 1)
    log_values = log_coefficients + xlogy(r, x) + xlog1py(p - r, -x)
    return np.exp(log_values)


def eval_basis(spec: BasisSpec, t: float) -> np.ndarray:
    """
    Evaluate the p + 1 Bernstein polynomials at t

    Args:
        spec: Basis degree and interval
        t: Evaluation point in [a, b]

    Returns:
        Vector (b_0^p(t), ..., b_p^p(t)), non-negative and summing to one
    """
    x = spec.rescale(np.atleast_1d(t))
    return _basis_values(spec, x)[0]


def eval_basis_recursive(spec: BasisSpec, t: float) -> np.ndarray:
    """
    Evaluate the basis with the degree (q - 1) -> q recursion
    b_r^q = (1 - x) b_r^(q-1) + x b_(r-1)^(q-1)

    Used to cross-check the closed form.
    """
    x = float(spec.rescale(np.atleast_1d(t))[0])
    values = np.ones(1)
    for _ in range(spec.degree):
        nxt = np.zeros(values.size + 1)
        nxt[:-1] += (1.0 - x) * values
        nxt[1:] += x * values
        values = nxt
    return values


def design_matrix(spec: BasisSpec, times: Sequence[float]) -> BasisMatrix:
    """
    Build the design matrix for strictly increasing times

    Args:
        spec: Basis degree and interval
        times: Strictly increasing abscissae inside [a, b]

    Returns:
        BasisMatrix with row i = eval_basis(spec, times[i])
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise InputError("times must be a one-dimensional sequence")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise InputError("times must be strictly increasing")
    x = spec.rescale(times)
    values = _basis_values(spec, x) if times.size else np.zeros((0, spec.size))
    return BasisMatrix(spec=spec, times=times, values=values)


def default_interval(time_vectors: Iterable[Sequence[float]]) -> Tuple[float, float]:
    """Shared basis interval: min/max observed time across all curves"""
    vectors = [np.asarray(t, dtype=float) for t in time_vectors if len(t)]
    if not vectors:
        raise InputError("Cannot derive a basis interval from empty data")
    lo = min(float(v.min()) for v in vectors)
    hi = max(float(v.max()) for v in vectors)
    if not hi > lo:
        raise ConfigurationError(f"Data span a degenerate interval [{lo}, {hi}]")
    return lo, hi


def fit_least_squares(spec: BasisSpec, times: Sequence[float], values: Sequence[float]) -> np.ndarray:
    """Least-squares Bernstein coefficients for a single curve"""
    basis = design_matrix(spec, times)
    coefficients, *_ = lstsq(basis.values, np.asarray(values, dtype=float))
    return coefficients


def evaluate_curve(spec: BasisSpec, coefficients: np.ndarray, times: Sequence[float]) -> np.ndarray:
    """sum_r theta_r b_r^p(t) on the given times"""
    return design_matrix(spec, times).values @ np.asarray(coefficients, dtype=float)
