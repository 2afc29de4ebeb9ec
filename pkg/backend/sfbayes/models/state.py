"""
Model quantities: observed curves, gaps, spatial kernels and parameter states
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from sfbayes.exceptions import DomainError, InputError
from sfbayes.models.basis import BasisMatrix, BasisSpec, design_matrix
from sfbayes.schemas import KernelFamily


@dataclass
class SiteSeries:
    """
    One monitored location: coordinates, ordered times, values and missing mask

    Values at masked positions are stored as NaN and never enter the likelihood.
    """

    site_id: str
    coords: Tuple[float, float]
    times: np.ndarray
    values: np.ndarray
    missing: Optional[np.ndarray] = None

    def __post_init__(self):
        self.site_id = str(self.site_id)
        self.coords = (float(self.coords[0]), float(self.coords[1]))
        if not np.all(np.isfinite(self.coords)):
            raise InputError(f"Site {self.site_id}: coordinates must be finite")
        self.times = np.asarray(self.times, dtype=float).copy()
        self.values = np.asarray(self.values, dtype=float).copy()
        if self.missing is None:
            self.missing = ~np.isfinite(self.values)
        self.missing = np.asarray(self.missing, dtype=bool).copy()
        if not (self.times.shape == self.values.shape == self.missing.shape) or self.times.ndim != 1:
            raise InputError(
                f"Site {self.site_id}: times, values and mask must be aligned vectors",
                details={"site_id": self.site_id},
            )
        if self.times.size == 0:
            raise InputError(f"Site {self.site_id}: no time points")
        if np.any(np.diff(self.times) <= 0):
            raise InputError(f"Site {self.site_id}: times must be strictly increasing")
        if np.any(~np.isfinite(self.values[~self.missing])):
            raise InputError(f"Site {self.site_id}: unmasked values must be finite")
        self.values[self.missing] = np.nan

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def observed(self) -> np.ndarray:
        return ~self.missing

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    @property
    def filled_values(self) -> np.ndarray:
        """Values with masked positions replaced by zero"""
        return np.where(self.missing, 0.0, self.values)

    def gaps(self) -> "GapVector":
        return GapVector.from_times(self.times)

    def with_mask(self, missing: np.ndarray) -> "SiteSeries":
        return SiteSeries(self.site_id, self.coords, self.times, self.values, missing)


@dataclass(frozen=True)
class GapVector:
    """d_ij = t_ij - t_(i-1)j with d_1j = 0"""

    values: np.ndarray

    @classmethod
    def from_times(cls, times: Sequence[float]) -> "GapVector":
        times = np.asarray(times, dtype=float)
        gaps = np.concatenate(([0.0], np.diff(times)))
        if np.any(gaps[1:] <= 0):
            raise InputError("gaps must be strictly positive after the first point")
        return cls(values=gaps)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SpatialKernel:
    """
    Isotropic covariance C(h)
    gaussian: variance * exp(-(decay h)^2); exponential: variance * exp(-decay h)
    """

    family: KernelFamily
    variance: float
    decay: float

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if not self.variance > 0 or not self.decay > 0:
            raise DomainError(
                "Kernel variance and decay must be positive",
                details={"variance": self.variance, "decay": self.decay},
            )

    def correlation(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        if self.family is KernelFamily.GAUSSIAN:
            return np.exp(-((self.decay * h) ** 2))
        return np.exp(-self.decay * h)

    def covariance(self, h) -> np.ndarray:
        return self.variance * self.correlation(h)


@dataclass
class ModelState:
    """One point in parameter space"""

    theta: np.ndarray  # (p + 1, m)
    mu_theta: np.ndarray  # (p + 1,)
    delta: List[np.ndarray]  # one chain per site, covering masked positions too
    tau2: float
    nu2: float
    kappa2: float
    spatial_decay: float
    ar_decay: float

    def validate(self, data: Optional[Sequence[SiteSeries]] = None) -> "ModelState":
        for name in ("tau2", "nu2", "kappa2", "spatial_decay", "ar_decay"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be strictly positive, got {value}", details={name: value})
        if self.theta.ndim != 2 or self.mu_theta.shape != (self.theta.shape[0],):
            raise InputError("theta must be (p + 1, m) and mu_theta (p + 1,)")
        if data is not None:
            if self.theta.shape[1] != len(data) or len(self.delta) != len(data):
                raise InputError("state does not match the number of sites")
            for d, series in zip(self.delta, data):
                if d.shape != series.times.shape:
                    raise InputError(f"delta chain shape mismatch at site {series.site_id}")
        return self

    def copy(self) -> "ModelState":
        return replace(
            self,
            theta=self.theta.copy(),
            mu_theta=self.mu_theta.copy(),
            delta=[d.copy() for d in self.delta],
        )

    @property
    def degree(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def n_sites(self) -> int:
        return self.theta.shape[1]


@dataclass(frozen=True)
class SiteDesign:
    """Per-site arrays reused by every likelihood evaluation"""

    series: SiteSeries
    basis: np.ndarray  # (n, p + 1)
    observed: np.ndarray
    values: np.ndarray  # zero at masked positions
    gaps: np.ndarray


@dataclass(frozen=True)
class ModelData:
    """Dataset bound to a basis family and a kernel family"""

    sites: Tuple[SiteDesign, ...]
    spec: BasisSpec
    coords: np.ndarray  # (m, 2)
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN
    site_ids: Tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def build(
        cls,
        data: Sequence[SiteSeries],
        spec: BasisSpec,
        kernel_family: KernelFamily = KernelFamily.GAUSSIAN,
        basis: Optional[Sequence[BasisMatrix]] = None,
    ) -> "ModelData":
        if not data:
            raise InputError("At least one site is required")
        if basis is None:
            basis = [design_matrix(spec, s.times) for s in data]
        if len(basis) != len(data):
            raise InputError("One basis matrix per site is required")
        sites = []
        for series, matrix in zip(data, basis):
            values = np.asarray(matrix, dtype=float)
            if values.shape != (series.n, spec.size):
                raise InputError(f"Basis matrix shape mismatch at site {series.site_id}")
            sites.append(
                SiteDesign(
                    series=series,
                    basis=values,
                    observed=series.observed,
                    values=series.filled_values,
                    gaps=series.gaps().values,
                )
            )
        coords = np.array([s.coords for s in data], dtype=float)
        return cls(
            sites=tuple(sites),
            spec=spec,
            coords=coords,
            kernel_family=KernelFamily(kernel_family),
            site_ids=tuple(s.site_id for s in data),
        )

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_observed(self) -> int:
        return int(sum(s.observed.sum() for s in self.sites))

    @property
    def n_points(self) -> int:
        return int(sum(s.observed.size for s in self.sites))

    @property
    def series(self) -> List[SiteSeries]:
        return [s.series for s in self.sites]
