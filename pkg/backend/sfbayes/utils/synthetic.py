"""
Synthetic datasets
Model-based curves, Fourier-based spatially correlated curves, irregular gaps and missing masks
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from sfbayes.exceptions import InputError
from sfbayes.models.basis import BasisSpec, design_matrix
from sfbayes.models.density import cholesky_with_jitter, kernel_matrix
from sfbayes.models.state import ModelState, SiteSeries, SpatialKernel
from sfbayes.schemas import (
    GapSchemeName,
    GridConfig,
    KernelFamily,
    McPlan,
    SimulationConfig,
    StudyKind,
    Study1Params,
    Study2Params,
)
from sfbayes.utils.prediction import simulate_ar_chain

logger = logging.getLogger(__name__)

FOURIER_TERMS = 9


@dataclass(frozen=True)
class GapScheme:
    """Distribution of the spacing between consecutive raw time points"""

    name: GapSchemeName = GapSchemeName.UNIFORM01
    fixed_gap: float = 1.0

    @property
    def mean(self) -> float:
        if self.name is GapSchemeName.UNIFORM01:
            return 0.5
        if self.name is GapSchemeName.BETA12:
            return 1.0 / 3.0
        return self.fixed_gap

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """count strictly positive gaps"""
        if self.name is GapSchemeName.UNIFORM01:
            gaps = rng.uniform(0.0, 1.0, count)
        elif self.name is GapSchemeName.BETA12:
            gaps = rng.beta(1.0, 2.0, count)
        else:
            gaps = np.full(count, self.fixed_gap)
        return np.maximum(gaps, 1e-12)


def resolve_time_span(time_span: Union[str, float], scheme: GapScheme, points_per_curve: int) -> float:
    """Length S of the shared interval [0, S]"""
    if time_span == "expected":
        return (points_per_curve - 1) * scheme.mean
    return float(time_span)


def draw_times(
    scheme: GapScheme, points: int, span: float, rng: np.random.Generator
) -> np.ndarray:
    """Cumulative sums of gaps, mapped affinely onto [0, span]"""
    raw = np.concatenate(([0.0], np.cumsum(scheme.draw(points - 1, rng))))
    times = raw / raw[-1] * span
    times[-1] = span
    return times


def site_grid(n_sites: int, grid: GridConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Jittered k x k grid over [0, extent]^2 keeping the first n_sites points
    (15 sites: a 4 x 4 grid minus one corner)
    """
    side = int(np.ceil(np.sqrt(n_sites)))
    if side * side == n_sites and n_sites > 1:
        side += 1
    spacing = grid.extent / max(side - 1, 1)
    xs, ys = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    points = np.column_stack([ys.ravel(), xs.ravel()])[:n_sites] * spacing
    return points + rng.uniform(-grid.jitter, grid.jitter, points.shape) * spacing


def site_ids(n_sites: int) -> List[str]:
    width = max(2, len(str(n_sites)))
    return [f"s{j + 1:0{width}d}" for j in range(n_sites)]


def draw_field(
    mean: Sequence[float],
    kernel: SpatialKernel,
    coords: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One m-variate normal draw per mean entry; rows of the (len(mean), m) result"""
    mean = np.asarray(mean, dtype=float)
    lower, _ = cholesky_with_jitter(kernel_matrix(kernel, coords), scale=kernel.variance)
    z = rng.standard_normal((mean.size, coords.shape[0]))
    return mean[:, None] + z @ lower.T


@dataclass
class MaskedDataset:
    """What a fit is allowed to see"""

    sites: List[SiteSeries]
    interval: Tuple[float, float]

    @property
    def n_observations(self) -> int:
        return sum(s.n for s in self.sites)

    @property
    def n_masked(self) -> int:
        return int(sum(s.missing.sum() for s in self.sites))

    def subset(self, keep: Sequence[str]) -> "MaskedDataset":
        wanted = set(keep)
        return MaskedDataset([s for s in self.sites if s.site_id in wanted], self.interval)


@dataclass(frozen=True)
class HeldOutValues:
    """True values behind the masked slots of one site"""

    site_id: str
    indices: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class FourierTarget:
    """X_j(t) = b0 + sum_k b(2k-1) sin(k w t) + b(2k) cos(k w t), k = 1..4"""

    coefficients: np.ndarray  # (9, m)
    omega: float
    sigma2: float

    def evaluate(self, j: int, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        beta = self.coefficients[:, j]
        value = np.full(t.shape, beta[0])
        for k in range(1, (FOURIER_TERMS - 1) // 2 + 1):
            value = value + beta[2 * k - 1] * np.sin(k * self.omega * t) + beta[2 * k] * np.cos(k * self.omega * t)
        return value


@dataclass
class TruthBundle:
    """Ground truth kept apart from the data a fit sees"""

    site_ids: List[str]
    times: List[np.ndarray]
    targets: List[np.ndarray]  # noiseless signal at each site's times
    state: Optional[ModelState] = None
    fourier: Optional[FourierTarget] = None
    held_out: List[HeldOutValues] = field(default_factory=list)

    def target_for(self, site_id: str) -> Tuple[np.ndarray, np.ndarray]:
        j = self.site_ids.index(site_id)
        return self.times[j], self.targets[j]


@dataclass
class SyntheticReplicate:
    index: int
    dataset: MaskedDataset
    truth: TruthBundle
    coords: np.ndarray


def _layout(plan: McPlan, grid: GridConfig, root: np.random.SeedSequence) -> np.ndarray:
    """Site coordinates shared by every replicate (first spawned stream)"""
    grid_seq = root.spawn(1)[0]
    return site_grid(plan.n_sites, grid, np.random.default_rng(grid_seq))


def generate_study1_replicate(
    index: int,
    seed: np.random.SeedSequence,
    coords: np.ndarray,
    plan: McPlan,
    scheme: GapScheme,
    params: Study1Params,
    span: float,
) -> SyntheticReplicate:
    rng = np.random.default_rng(seed)
    spec = BasisSpec(degree=params.degree, interval=(0.0, span))
    ids = site_ids(plan.n_sites)
    if params.kappa2 > 0:
        kernel = SpatialKernel(KernelFamily.GAUSSIAN, params.kappa2, params.spatial_decay)
        theta = draw_field(params.mu_theta, kernel, coords, rng)
    else:
        theta = np.repeat(np.asarray(params.mu_theta, dtype=float)[:, None], plan.n_sites, axis=1)

    sites, times_list, targets, deltas = [], [], [], []
    for j in range(plan.n_sites):
        times = draw_times(scheme, plan.points_per_curve, span, rng)
        if params.nu2 > 0:
            delta = simulate_ar_chain(times, params.ar_decay, params.nu2, rng)
        else:
            delta = np.zeros(times.size)
        signal = design_matrix(spec, times).values @ theta[:, j] + delta
        values = signal + np.sqrt(params.tau2) * rng.standard_normal(times.size)
        sites.append(SiteSeries(ids[j], tuple(coords[j]), times, values, np.zeros(times.size, dtype=bool)))
        times_list.append(times)
        targets.append(signal)
        deltas.append(delta)

    state = ModelState(
        theta=theta,
        mu_theta=np.asarray(params.mu_theta, dtype=float),
        delta=deltas,
        tau2=params.tau2,
        nu2=params.nu2,
        kappa2=params.kappa2,
        spatial_decay=params.spatial_decay,
        ar_decay=params.ar_decay,
    )
    truth = TruthBundle(site_ids=ids, times=times_list, targets=targets, state=state)
    return SyntheticReplicate(index, MaskedDataset(sites, (0.0, span)), truth, coords)


def generate_study1(
    plan: McPlan,
    scheme: GapScheme,
    params: Optional[Study1Params] = None,
    grid: Optional[GridConfig] = None,
    time_span: Union[str, float] = "expected",
) -> List[SyntheticReplicate]:
    """
    Curves drawn from the hierarchical model itself

    Args:
        plan: Replicates, sites, points per curve and master seed
        scheme: Gap distribution
        params: Generating values (mu_theta, kappa2, decays, variances)
        grid: Site layout
        time_span: "expected" or the length of the shared time interval

    Returns:
        One SyntheticReplicate per MC replicate, each with its generating state
    """
    params = params or Study1Params()
    grid = grid or GridConfig()
    span = resolve_time_span(time_span, scheme, plan.points_per_curve)
    root = np.random.SeedSequence(plan.master_seed)
    coords = _layout(plan, grid, root)
    seeds = root.spawn(plan.replicates)
    logger.info(f"Generating {plan.replicates} model-based replicates on [0, {span:.3g}]")
    return [
        generate_study1_replicate(k, seeds[k], coords, plan, scheme, params, span)
        for k in range(plan.replicates)
    ]


def generate_study2_replicate(
    index: int,
    seed: np.random.SeedSequence,
    coords: np.ndarray,
    plan: McPlan,
    scheme: GapScheme,
    params: Study2Params,
    span: float,
) -> SyntheticReplicate:
    rng = np.random.default_rng(seed)
    ids = site_ids(plan.n_sites)
    period = params.period or span
    if params.kernel_variance > 0:
        kernel = SpatialKernel(KernelFamily.EXPONENTIAL, params.kernel_variance, params.kernel_rate)
        beta = draw_field(np.full(FOURIER_TERMS, params.beta_mean), kernel, coords, rng)
    else:
        beta = np.full((FOURIER_TERMS, plan.n_sites), params.beta_mean)
    fourier = FourierTarget(coefficients=beta, omega=2.0 * np.pi / period, sigma2=params.sigma2)

    sites, times_list, targets = [], [], []
    for j in range(plan.n_sites):
        times = draw_times(scheme, plan.points_per_curve, span, rng)
        signal = fourier.evaluate(j, times)
        values = signal + np.sqrt(params.sigma2) * rng.standard_normal(times.size)
        sites.append(SiteSeries(ids[j], tuple(coords[j]), times, values, np.zeros(times.size, dtype=bool)))
        times_list.append(times)
        targets.append(signal)
    truth = TruthBundle(site_ids=ids, times=times_list, targets=targets, fourier=fourier)
    return SyntheticReplicate(index, MaskedDataset(sites, (0.0, span)), truth, coords)


def generate_study2(
    plan: McPlan,
    params: Optional[Study2Params] = None,
    scheme: Optional[GapScheme] = None,
    grid: Optional[GridConfig] = None,
    time_span: Union[str, float] = "expected",
) -> List[SyntheticReplicate]:
    """
    Fourier target curves whose nine coefficients form exponential-kernel spatial fields

    Returns:
        One SyntheticReplicate per MC replicate with the noiseless targets as truth
    """
    params = params or Study2Params()
    scheme = scheme or GapScheme()
    grid = grid or GridConfig()
    span = resolve_time_span(time_span, scheme, plan.points_per_curve)
    root = np.random.SeedSequence(plan.master_seed)
    coords = _layout(plan, grid, root)
    seeds = root.spawn(plan.replicates)
    logger.info(f"Generating {plan.replicates} Fourier replicates on [0, {span:.3g}]")
    return [
        generate_study2_replicate(k, seeds[k], coords, plan, scheme, params, span)
        for k in range(plan.replicates)
    ]


def apply_missing_mask(
    dataset: MaskedDataset, count: int, seed: int
) -> Tuple[MaskedDataset, List[HeldOutValues]]:
    """
    Mask count observations uniformly at random without replacement

    The mask depends only on the dataset shape and the seed, so replicates
    sharing a layout share the mask.

    Returns:
        Tuple of (masked dataset, true values behind the new mask per site)
    """
    if count < 0:
        raise InputError(f"Mask count must be non-negative, got {count}")
    available = [np.flatnonzero(s.observed) for s in dataset.sites]
    total = sum(a.size for a in available)
    if count > total:
        raise InputError(f"Cannot mask {count} of {total} observations", details={"count": count, "total": total})
    if count == 0:
        return dataset, []

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(total, size=count, replace=False))
    offsets = np.cumsum([0] + [a.size for a in available])

    sites, held_out = [], []
    for j, series in enumerate(dataset.sites):
        picked = chosen[(chosen >= offsets[j]) & (chosen < offsets[j + 1])] - offsets[j]
        indices = available[j][picked]
        if indices.size == 0:
            sites.append(series)
            continue
        held_out.append(HeldOutValues(series.site_id, indices, series.values[indices].copy()))
        missing = series.missing.copy()
        missing[indices] = True
        sites.append(series.with_mask(missing))
    logger.info(f"Masked {count} of {total} observations")
    return MaskedDataset(sites, dataset.interval), held_out


def generate(config: SimulationConfig) -> List[SyntheticReplicate]:
    """Dispatch on the configured study kind; masks are applied when missing_count > 0"""
    scheme = GapScheme(config.gap_scheme)
    if config.study is StudyKind.STUDY1 or config.study is StudyKind.RECOVERY:
        replicates = generate_study1(config.plan, scheme, config.study1, config.grid, config.time_span)
    else:
        replicates = generate_study2(config.plan, config.study2, scheme, config.grid, config.time_span)
    if config.missing_count > 0 or config.study is StudyKind.MISSING:
        mask_seed = config.mask_seed if config.mask_seed is not None else config.plan.master_seed
        for replicate in replicates:
            replicate.dataset, replicate.truth.held_out = apply_missing_mask(
                replicate.dataset, config.missing_count, mask_seed
            )
    return replicates


def held_out_map(held_out: Sequence[HeldOutValues]) -> Dict[Tuple[str, int], float]:
    """(site_id, index) -> true value"""
    return {
        (h.site_id, int(i)): float(v) for h in held_out for i, v in zip(h.indices, h.values)
    }
