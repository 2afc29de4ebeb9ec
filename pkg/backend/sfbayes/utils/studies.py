"""
Monte Carlo study drivers
Each replicate is generated, fitted and scored independently; replicates run on a thread pool
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence

import numpy as np

from sfbayes.models.basis import BasisSpec
from sfbayes.schemas import PredictionRequest, RunConfig, SamplerConfig, StudyKind, TargetSite
from sfbayes.utils.metrics import CurvePair, MetricRecord, hpd, ise
from sfbayes.utils.prediction import fitted_curve, predict_curves
from sfbayes.utils.sampler import PosteriorDraws, impute_missing, run_chain
from sfbayes.utils.synthetic import (
    GapScheme,
    SyntheticReplicate,
    generate,
    generate_study1,
    held_out_map,
)

logger = logging.getLogger(__name__)

ReplicateScorer = Callable[[SyntheticReplicate, np.random.SeedSequence], List[MetricRecord]]


def unit_ise(times: np.ndarray, estimate: np.ndarray, target: np.ndarray, interval) -> float:
    """ISE with the time axis mapped onto [0, 1]"""
    a, b = interval
    return ise(CurvePair((np.asarray(times) - a) / (b - a), estimate, target))


def _fit(
    replicate: SyntheticReplicate,
    config: RunConfig,
    n_bases: int,
    seed: np.random.SeedSequence,
    sites: Optional[Sequence[str]] = None,
    include_random_effect: bool = True,
) -> PosteriorDraws:
    dataset = replicate.dataset if sites is None else replicate.dataset.subset(sites)
    sampler: SamplerConfig = config.sampler.model_copy(update={"include_random_effect": include_random_effect})
    spec = BasisSpec.from_bases(n_bases, dataset.interval)
    return run_chain(
        dataset.sites,
        spec,
        config.priors,
        sampler,
        kernel_family=config.kernel_family,
        rng=np.random.default_rng(seed),
    )


def _run_replicates(
    replicates: Sequence[SyntheticReplicate], scorer: ReplicateScorer, seed: int, threads: int
) -> List[MetricRecord]:
    seeds = np.random.SeedSequence(seed).spawn(len(replicates))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(scorer, replicates, seeds))
    records = [r for batch in results for r in batch]
    logger.info(f"Scored {len(replicates)} replicates into {len(records)} metric rows")
    return records


def run_study1(config: RunConfig, threads: int = 1) -> List[MetricRecord]:
    """Curve recovery: ISE of the posterior mean curve against the noiseless signal, per site"""
    params = config.simulation.study1
    scheme = GapScheme(config.simulation.gap_scheme)
    replicates = generate_study1(
        config.simulation.plan, scheme, params, config.simulation.grid, config.simulation.time_span
    )

    def score(replicate: SyntheticReplicate, seed: np.random.SeedSequence) -> List[MetricRecord]:
        draws = _fit(replicate, config, params.degree + 1, seed)
        records = []
        for j, series in enumerate(replicate.dataset.sites):
            estimate = fitted_curve(draws, j, series.times, include_delta=True)
            _, target = replicate.truth.target_for(series.site_id)
            value = unit_ise(series.times, estimate, target, replicate.dataset.interval)
            records.append(MetricRecord(replicate.index, series.site_id, f"ise_{scheme.name.value}", value))
        return records

    return _run_replicates(replicates, score, config.seed, threads)


def run_study2(config: RunConfig, threads: int = 1) -> List[MetricRecord]:
    """
    Basis-count sweep on Fourier curves

    Held-out sites are predicted from the remaining ones for every basis count.
    In-sample ISE with and without the random effect is scored at the smallest count.
    """
    replicates = generate(config.simulation.model_copy(update={"study": StudyKind.STUDY2, "missing_count": 0}))
    holdout_index = config.simulation.grid.holdout_sites

    def score(replicate: SyntheticReplicate, seed: np.random.SeedSequence) -> List[MetricRecord]:
        sites = replicate.dataset.sites
        held = [sites[i] for i in holdout_index if i < len(sites)]
        held_ids = {s.site_id for s in held}
        train_ids = [s.site_id for s in sites if s.site_id not in held_ids]
        streams = seed.spawn(len(config.bases) + 1)
        records = []
        for k, n_bases in enumerate(sorted(config.bases)):
            fit_seed, predict_seed = streams[k].spawn(2)
            draws = _fit(replicate, config, n_bases, fit_seed, sites=train_ids)
            request = PredictionRequest(
                targets=[
                    TargetSite(site_id=s.site_id, x=s.coords[0], y=s.coords[1], times=s.times.tolist())
                    for s in held
                ],
                include_delta=False,
                include_obs_noise=False,
            )
            curves = predict_curves(draws, request, rng=np.random.default_rng(predict_seed))
            for curve in curves:
                _, target = replicate.truth.target_for(curve.site_id)
                value = unit_ise(curve.times, curve.mean, target, replicate.dataset.interval)
                records.append(MetricRecord(replicate.index, curve.site_id, f"heldout_ise_{n_bases}", value))

            if k == 0:
                no_delta = _fit(replicate, config, n_bases, streams[-1], sites=train_ids, include_random_effect=False)
                for label, fitted, with_delta in (("delta", draws, True), ("no_delta", no_delta, False)):
                    for j, series in enumerate(fitted_sites(replicate, train_ids)):
                        estimate = fitted_curve(fitted, j, series.times, include_delta=with_delta)
                        _, target = replicate.truth.target_for(series.site_id)
                        value = unit_ise(series.times, estimate, target, replicate.dataset.interval)
                        records.append(
                            MetricRecord(replicate.index, series.site_id, f"insample_ise_{label}_{n_bases}", value)
                        )
        return records

    return _run_replicates(replicates, score, config.seed, threads)


def fitted_sites(replicate: SyntheticReplicate, site_ids: Sequence[str]):
    """Training sites in the canonical order used by the sampler"""
    wanted = set(site_ids)
    return sorted((s for s in replicate.dataset.sites if s.site_id in wanted), key=lambda s: s.site_id)


def run_missing_study(config: RunConfig, threads: int = 1) -> List[MetricRecord]:
    """Coverage and mean width of HPD intervals for imputed masked values, per basis count"""
    simulation = config.simulation.model_copy(update={"study": StudyKind.MISSING})
    replicates = generate(simulation)
    mass = config.prediction.mass

    def score(replicate: SyntheticReplicate, seed: np.random.SeedSequence) -> List[MetricRecord]:
        truth = held_out_map(replicate.truth.held_out)
        streams = seed.spawn(len(config.bases))
        records = []
        for k, n_bases in enumerate(sorted(config.bases)):
            fit_seed, impute_seed = streams[k].spawn(2)
            draws = _fit(replicate, config, n_bases, fit_seed)
            imputed = impute_missing(
                draws, replicate.dataset.sites, rng=np.random.default_rng(impute_seed), mass=mass
            )
            by_site = {}
            for value in imputed:
                covered = value.lower <= truth[(value.site_id, value.index)] <= value.upper
                by_site.setdefault(value.site_id, []).append((covered, value.upper - value.lower))
            for site_id, rows in sorted(by_site.items()):
                covered, widths = zip(*rows)
                records.append(MetricRecord(replicate.index, site_id, f"coverage_{n_bases}", float(np.mean(covered))))
                records.append(MetricRecord(replicate.index, site_id, f"hpd_width_{n_bases}", float(np.mean(widths))))
                records.append(MetricRecord(replicate.index, site_id, f"masked_{n_bases}", float(len(rows))))
        return records

    return _run_replicates(replicates, score, config.seed, threads)


def run_recovery_study(config: RunConfig, threads: int = 1) -> List[MetricRecord]:
    """Whether 95% credible intervals of tau2 and each mu_theta_r cover the generating values"""
    params = config.simulation.study1
    scheme = GapScheme(config.simulation.gap_scheme)
    replicates = generate_study1(
        config.simulation.plan, scheme, params, config.simulation.grid, config.simulation.time_span
    )
    mass = config.prediction.mass

    def score(replicate: SyntheticReplicate, seed: np.random.SeedSequence) -> List[MetricRecord]:
        draws = _fit(replicate, config, params.degree + 1, seed)
        series = draws.scalar_series()
        truth = {"tau2": params.tau2}
        truth.update({f"mu_theta_{r}": value for r, value in enumerate(params.mu_theta)})
        records = []
        for name, value in truth.items():
            interval = hpd(series[name], mass)
            records.append(MetricRecord(replicate.index, "all", f"covers_{name}", float(interval.contains(value))))
        return records

    return _run_replicates(replicates, score, config.seed, threads)


STUDY_RUNNERS = {
    StudyKind.STUDY1: run_study1,
    StudyKind.STUDY2: run_study2,
    StudyKind.MISSING: run_missing_study,
    StudyKind.RECOVERY: run_recovery_study,
}


def run_study(config: RunConfig, threads: int = 1) -> List[MetricRecord]:
    kind = config.simulation.study
    logger.info(f"Running {kind.value} with {config.simulation.plan.replicates} replicates on {threads} threads")
    return STUDY_RUNNERS[kind](config, threads)
