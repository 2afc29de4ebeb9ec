"""
Pydantic schemas for run configuration, priors, requests and manifests
"""

import json
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    Field,
    PositiveFloat,
    ValidationError,
    field_validator,
    model_validator,
)

from sfbayes.config import settings
from sfbayes.exceptions import ConfigurationError


class KernelFamily(str, Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


class GapSchemeName(str, Enum):
    UNIFORM01 = "uniform01"
    BETA12 = "beta12"
    FIXED = "fixed"


class StudyKind(str, Enum):
    STUDY1 = "study1"
    STUDY2 = "study2"
    MISSING = "missing"
    RECOVERY = "recovery"


class PriorSpec(BaseModel):
    """Hyperparameters of the hierarchical priors (inverse-gamma shape/scale pairs)"""

    phi_shape: PositiveFloat = 2.0
    phi_scale: PositiveFloat = 1.0
    eta_shape: PositiveFloat = 2.0
    eta_scale: PositiveFloat = 1.0
    tau2_shape: PositiveFloat = 2.0
    tau2_scale: PositiveFloat = 1.0
    kappa2_shape: PositiveFloat = 2.0
    kappa2_scale: PositiveFloat = 1.0
    nu2_shape: PositiveFloat = 3.0
    nu2_scale: PositiveFloat = 2.0
    mu_mean: float = 0.0
    mu_variance: PositiveFloat = 50.0**2


class SamplerConfig(BaseModel):
    """Chain protocol: single chain, burn-in, thinning, Metropolis adaptation"""

    total_iterations: int = Field(25_000, ge=1)
    burn_in: int = Field(5_000, ge=0)
    thin: int = Field(10, ge=1)
    seed: Optional[int] = None
    adaptation_window: int = Field(50, ge=1)
    target_acceptance: float = Field(0.44, gt=0.0, lt=1.0)
    initial_step: float = Field(0.5, ge=0.0)
    include_random_effect: bool = True
    store_full_delta: bool = False

    @model_validator(mode="after")
    def _check_burn_in(self) -> "SamplerConfig":
        if self.burn_in >= self.total_iterations:
            raise ValueError("burn_in must be smaller than total_iterations")
        return self

    @property
    def retained_draws(self) -> int:
        return (self.total_iterations - self.burn_in) // self.thin


class McPlan(BaseModel):
    """Monte Carlo replication plan"""

    replicates: int = Field(100, ge=1)
    n_sites: int = Field(15, ge=1)
    points_per_curve: int = Field(200, ge=2)
    master_seed: int = settings.DEFAULT_SEED


class Study1Params(BaseModel):
    """Generating values for curves drawn from the hierarchical model itself"""

    mu_theta: List[float] = Field(default_factory=lambda: [3.0, 29.0, 15.0, 7.0])
    kappa2: float = Field(2.0, ge=0.0)
    spatial_decay: PositiveFloat = 1.0
    ar_decay: PositiveFloat = 0.2
    nu2: float = Field(0.5, ge=0.0)
    tau2: float = Field(1.0, ge=0.0)

    @field_validator("mu_theta")
    @classmethod
    def _non_empty(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("mu_theta needs at least one coefficient mean")
        return value

    @property
    def degree(self) -> int:
        return len(self.mu_theta) - 1


class Study2Params(BaseModel):
    """Fourier-generated target curves with exponential-kernel coefficient field"""

    sigma2: float = Field(2.0, ge=0.0)
    beta_mean: float = 10.0
    kernel_variance: float = Field(2.0, ge=0.0)
    kernel_rate: PositiveFloat = 1.0
    # None: one fundamental cycle over the observed window
    period: Optional[PositiveFloat] = None


class GridConfig(BaseModel):
    """Jittered 4x4 site grid minus one corner"""

    extent: PositiveFloat = 1.0
    jitter: float = Field(0.15, ge=0.0, lt=0.5)
    holdout_sites: List[int] = Field(default_factory=lambda: [0, 10])


class SimulationConfig(BaseModel):
    study: StudyKind = StudyKind.STUDY1
    plan: McPlan = Field(default_factory=McPlan)
    gap_scheme: GapSchemeName = GapSchemeName.UNIFORM01
    study1: Study1Params = Field(default_factory=Study1Params)
    study2: Study2Params = Field(default_factory=Study2Params)
    grid: GridConfig = Field(default_factory=GridConfig)
    missing_count: int = Field(0, ge=0)
    mask_seed: Optional[int] = None
    time_span: Union[Literal["expected"], PositiveFloat] = "expected"


class PredictionConfig(BaseModel):
    include_delta: bool = True
    include_obs_noise: bool = True
    mass: float = Field(0.95, gt=0.0, lt=1.0)
    n_target_times: int = Field(250, ge=2)
    keep_samples: bool = False


class ThresholdSpec(BaseModel):
    """Report thresholds on the log(PM10) scale"""

    who: float = 3.0
    nom_annual: float = 3.6
    nom_acute: float = 4.3

    @model_validator(mode="after")
    def _ordered(self) -> "ThresholdSpec":
        if not self.who < self.nom_annual < self.nom_acute:
            raise ValueError("thresholds must satisfy who < nom_annual < nom_acute")
        return self

    def as_dict(self) -> Dict[str, float]:
        return {"who": self.who, "nom_annual": self.nom_annual, "nom_acute": self.nom_acute}


class PathsConfig(BaseModel):
    dataset: Optional[Path] = None
    raw_hourly: Optional[Path] = None
    targets: Optional[Path] = None
    truth: Optional[Path] = None
    draws_dir: Optional[Path] = None
    predictions: Optional[Path] = None
    output_dir: Path = Path(settings.OUTPUT_DIR)

    @field_validator("dataset", "raw_hourly", "targets", "truth")
    @classmethod
    def _must_exist(cls, value: Optional[Path]) -> Optional[Path]:
        if value is not None and not Path(value).exists():
            raise ValueError(f"path does not exist: {value}")
        return value


class PreprocessConfig(BaseModel):
    log_transform: bool = True


class RunConfig(BaseModel):
    """Complete run configuration, one JSON document"""

    seed: int = settings.DEFAULT_SEED
    bases: List[int] = Field(default_factory=lambda: [4, 12, 18])
    basis_interval: Optional[Tuple[float, float]] = None
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN
    priors: PriorSpec = Field(default_factory=PriorSpec)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    prediction: PredictionConfig = Field(default_factory=PredictionConfig)
    thresholds: ThresholdSpec = Field(default_factory=ThresholdSpec)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    preprocessing: PreprocessConfig = Field(default_factory=PreprocessConfig)

    @field_validator("bases")
    @classmethod
    def _positive_bases(cls, value: List[int]) -> List[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError("every basis count must be at least 1")
        return value

    @field_validator("basis_interval")
    @classmethod
    def _proper_interval(cls, value: Optional[Tuple[float, float]]) -> Optional[Tuple[float, float]]:
        if value is not None and not value[1] > value[0]:
            raise ValueError("basis_interval must satisfy a < b")
        return value

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        """Load and validate a JSON config; any failure is a configuration error"""
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigurationError(f"Cannot read config {path}: {e}")
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            raise ConfigurationError(
                f"Invalid config {path}",
                details={"errors": json.loads(e.json())},
            )

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.model_dump_json(indent=2) + "\n")


class TargetSite(BaseModel):
    site_id: str = Field(..., min_length=1)
    x: float
    y: float
    times: List[float] = Field(default_factory=list)

    @field_validator("times")
    @classmethod
    def _strictly_increasing(cls, value: List[float]) -> List[float]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("target times must be strictly increasing")
        return value


class PredictionRequest(BaseModel):
    """Request model for curve prediction at unmonitored coordinates"""

    targets: List[TargetSite] = Field(..., min_length=1)
    include_delta: bool = True
    include_obs_noise: bool = True
    mass: float = Field(0.95, gt=0.0, lt=1.0)
    keep_samples: bool = False


class RunManifest(BaseModel):
    """Run manifest written next to a draws CSV"""

    version: str = settings.VERSION
    seed: int
    sampler: SamplerConfig
    priors: PriorSpec
    kernel_family: KernelFamily
    degree: int
    interval: Tuple[float, float]
    site_ids: List[str]
    coords: List[Tuple[float, float]]
    retained_draws: int
    acceptance_rates: Dict[str, float]
    wall_time_seconds: float
    created_at: datetime


class PredictionSidecar(BaseModel):
    include_delta: bool
    include_obs_noise: bool
    mass: float
    draw_count: int
    target_count: int
    site_ids: List[str]
