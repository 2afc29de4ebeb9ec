"""
Scoring and chain diagnostics
ISE, MSE decomposition, HPD intervals, effective sample size and Geweke z-scores
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from sfbayes.exceptions import InputError

logger = logging.getLogger(__name__)

MIN_HPD_DRAWS = 10
MIN_DIAGNOSTIC_DRAWS = 100


@dataclass(frozen=True)
class CurvePair:
    """Estimate and target on one common, strictly increasing grid"""

    t: np.ndarray
    estimate: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        estimate = np.asarray(self.estimate, dtype=float)
        target = np.asarray(self.target, dtype=float)
        if not (t.shape == estimate.shape == target.shape) or t.ndim != 1:
            raise InputError(
                "Curve grids do not match",
                details={"t": list(t.shape), "estimate": list(estimate.shape), "target": list(target.shape)},
            )
        if t.size < 2:
            raise InputError("ISE needs at least two grid points")
        if np.any(np.diff(t) <= 0):
            raise InputError("Curve grid must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "estimate", estimate)
        object.__setattr__(self, "target", target)


def ise(pair: CurvePair) -> float:
    """Trapezoidal integral of (estimate - target)^2 over the native grid"""
    return float(trapezoid((pair.estimate - pair.target) ** 2, pair.t))


@dataclass(frozen=True)
class MseDecomposition:
    bias2: np.ndarray
    variance: np.ndarray
    mse: np.ndarray


def mse_decomposition(estimates, truth) -> MseDecomposition:
    """
    Empirical bias^2 + variance split of replicate estimates

    Args:
        estimates: Array with replicates along axis 0
        truth: Target value(s), broadcastable against one replicate

    Returns:
        MseDecomposition with population variance, so mse = bias2 + variance
    """
    estimates = np.asarray(estimates, dtype=float)
    if estimates.ndim == 0 or estimates.shape[0] < 2:
        raise InputError("mse_decomposition needs at least two replicates")
    truth = np.asarray(truth, dtype=float)
    mean = estimates.mean(axis=0)
    bias2 = (mean - truth) ** 2
    variance = estimates.var(axis=0)
    return MseDecomposition(bias2=bias2, variance=variance, mse=bias2 + variance)


@dataclass(frozen=True)
class HpdInterval:
    lower: float
    upper: float
    mass: float = 0.95

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def hpd(draws: Sequence[float], mass: float = 0.95) -> HpdInterval:
    """
    Shortest contiguous window covering ceil(mass * n) sorted draws

    Assumes a unimodal distribution; multimodal posteriors get one covering interval.
    """
    values = np.sort(np.asarray(draws, dtype=float).ravel())
    n = values.size
    if n < MIN_HPD_DRAWS:
        raise InputError(f"HPD needs at least {MIN_HPD_DRAWS} draws, got {n}")
    if not 0.0 < mass < 1.0:
        raise InputError(f"HPD mass must lie in (0, 1), got {mass}")
    if np.any(~np.isfinite(values)):
        raise InputError("HPD draws must be finite")
    k = min(n, max(1, int(np.ceil(mass * n - 1e-9))))
    widths = values[k - 1 :] - values[: n - k + 1]
    start = int(np.argmin(widths))
    return HpdInterval(lower=float(values[start]), upper=float(values[start + k - 1]), mass=mass)


def hpd_bounds(samples: np.ndarray, mass: float = 0.95) -> np.ndarray:
    """Pointwise HPD bounds of a (draws, points) array; returns (2, points)"""
    samples = np.asarray(samples, dtype=float)
    bounds = np.empty((2, samples.shape[1]))
    for i in range(samples.shape[1]):
        interval = hpd(samples[:, i], mass)
        bounds[0, i], bounds[1, i] = interval.lower, interval.upper
    return bounds


def autocorrelation(chain: np.ndarray) -> np.ndarray:
    """Normalised autocorrelation at all lags via FFT"""
    x = np.asarray(chain, dtype=float) - np.mean(chain)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(x, size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), size)[:n]
    return acov / acov[0]


def effective_sample_size(chain: Sequence[float]) -> float:
    """
    ESS with Geyer's initial positive sequence truncation

    Returns nan for a constant chain.
    """
    x = np.asarray(chain, dtype=float)
    n = x.size
    if n < 2 or np.ptp(x) == 0:
        return float("nan")
    rho = autocorrelation(x)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    tau = max(tau, 1.0 / n)
    return float(n / tau)


def geweke_z(chain: Sequence[float], first: float = 0.1, last: float = 0.5) -> float:
    """Difference of the means of the first 10% and last 50%, scaled by ESS-based standard errors"""
    x = np.asarray(chain, dtype=float)
    n = x.size
    head = x[: max(2, int(first * n))]
    tail = x[n - max(2, int(last * n)) :]

    def variance_of_mean(segment: np.ndarray) -> float:
        ess = effective_sample_size(segment)
        if not np.isfinite(ess):
            return 0.0
        return float(segment.var(ddof=1) / ess)

    se2 = variance_of_mean(head) + variance_of_mean(tail)
    diff = float(head.mean() - tail.mean())
    if se2 == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / float(np.sqrt(se2))


@dataclass(frozen=True)
class ParameterDiagnostics:
    parameter: str
    ess: float
    geweke_z: float
    degenerate: bool = False


@dataclass
class ChainDiagnostics:
    parameters: Dict[str, ParameterDiagnostics] = field(default_factory=dict)
    acceptance: Dict[str, float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"parameter": d.parameter, "ess": d.ess, "geweke_z": d.geweke_z, "degenerate": d.degenerate}
                for d in self.parameters.values()
            ]
        )

    def to_dict(self) -> dict:
        return {
            "parameters": {
                name: {"ess": d.ess, "geweke_z": d.geweke_z, "degenerate": d.degenerate}
                for name, d in self.parameters.items()
            },
            "acceptance": dict(self.acceptance),
        }


def chain_diagnostics(
    series: Mapping[str, Sequence[float]], acceptance: Optional[Mapping[str, float]] = None
) -> ChainDiagnostics:
    """
    ESS and Geweke z per scalar parameter trace

    Args:
        series: Parameter name to retained draws (at least 100 each)
        acceptance: Metropolis acceptance rates to carry along

    Returns:
        ChainDiagnostics; constant traces are flagged degenerate with ess = nan
    """
    report = ChainDiagnostics(acceptance=dict(acceptance or {}))
    for name, values in series.items():
        chain = np.asarray(values, dtype=float)
        if chain.size < MIN_DIAGNOSTIC_DRAWS:
            raise InputError(
                f"Diagnostics need at least {MIN_DIAGNOSTIC_DRAWS} draws, got {chain.size} for {name}"
            )
        if np.ptp(chain) == 0:
            logger.warning(f"Parameter {name} has a constant trace")
            report.parameters[name] = ParameterDiagnostics(name, float("nan"), 0.0, degenerate=True)
            continue
        report.parameters[name] = ParameterDiagnostics(name, effective_sample_size(chain), geweke_z(chain))
    return report


@dataclass(frozen=True)
class MetricRecord:
    """One row of a metric table"""

    replicate: int
    site_id: str
    metric: str
    value: float


def metric_frame(records: Iterable[MetricRecord]) -> pd.DataFrame:
    """Metric table with columns replicate, site_id, metric, value"""
    return pd.DataFrame(
        [(r.replicate, r.site_id, r.metric, r.value) for r in records],
        columns=["replicate", "site_id", "metric", "value"],
    )


def boxplot_summary(table: pd.DataFrame) -> pd.DataFrame:
    """Median, quartiles and Tukey whiskers per (metric, site_id) of a metric table"""
    rows = []
    for (metric, site_id), group in table.groupby(["metric", "site_id"], sort=True):
        values = group["value"].to_numpy(dtype=float)
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        iqr = q3 - q1
        inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
        rows.append(
            {
                "metric": metric,
                "site_id": site_id,
                "n": values.size,
                "median": median,
                "q1": q1,
                "q3": q3,
                "whisker_lo": inside.min(),
                "whisker_hi": inside.max(),
            }
        )
    return pd.DataFrame(rows)


def threshold_report(predictions: pd.DataFrame, thresholds: Mapping[str, float]) -> pd.DataFrame:
    """
    Share of predicted points above each threshold, per site

    The share is computed for the posterior mean and for both HPD bounds; a site
    exceeds a threshold consistently when its mean is above it on more than half
    of the points.
    """
    rows = []
    for site_id, group in predictions.groupby("site_id", sort=True):
        for name, level in thresholds.items():
            frac_mean = float((group["mean"] > level).mean())
            rows.append(
                {
                    "site_id": site_id,
                    "threshold": name,
                    "level": level,
                    "frac_mean": frac_mean,
                    "frac_hpd_lo": float((group["hpd_lo"] > level).mean()),
                    "frac_hpd_hi": float((group["hpd_hi"] > level).mean()),
                    "exceeds_consistently": frac_mean > 0.5,
                }
            )
    return pd.DataFrame(rows)
