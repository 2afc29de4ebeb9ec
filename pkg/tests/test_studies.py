"""
Tests for the Monte Carlo study drivers

Desk-scale studies are marked slow: pytest -m slow tests/test_studies.py
"""

import numpy as np
import pytest

from sfbayes.schemas import (
    GapSchemeName,
    McPlan,
    RunConfig,
    SamplerConfig,
    SimulationConfig,
    StudyKind,
)
from sfbayes.utils import studies
from sfbayes.utils.metrics import metric_frame
from sfbayes.utils.studies import run_study, unit_ise


def study_config(kind, plan, sampler, bases=(4,), **simulation):
    return RunConfig(
        seed=101,
        bases=list(bases),
        sampler=sampler,
        simulation=SimulationConfig(study=kind, plan=plan, **simulation),
    )


TINY_PLAN = McPlan(replicates=2, n_sites=4, points_per_curve=15, master_seed=3)
TINY_SAMPLER = SamplerConfig(total_iterations=60, burn_in=20, thin=2)


def test_unit_ise_rescales_time_axis():
    t = np.linspace(10.0, 20.0, 2001)
    assert unit_ise(t, np.ones_like(t), np.zeros_like(t), (10.0, 20.0)) == pytest.approx(1.0)


class TestStudyRunners:
    def test_study1_scores_every_site(self):
        records = run_study(study_config(StudyKind.STUDY1, TINY_PLAN, TINY_SAMPLER))
        frame = metric_frame(records)
        assert len(frame) == 8
        assert set(frame["metric"]) == {"ise_uniform01"}
        assert np.all(np.isfinite(frame["value"]))

    def test_study2_metric_names(self):
        plan = McPlan(replicates=1, n_sites=12, points_per_curve=15, master_seed=3)
        records = run_study(study_config(StudyKind.STUDY2, plan, TINY_SAMPLER, bases=(4, 2)))
        metrics = set(metric_frame(records)["metric"])
        assert {"heldout_ise_2", "heldout_ise_4", "insample_ise_delta_2", "insample_ise_no_delta_2"} == metrics

    def test_missing_study_reports_coverage(self):
        config = study_config(StudyKind.MISSING, TINY_PLAN, TINY_SAMPLER, bases=(3,), missing_count=10)
        frame = metric_frame(run_study(config))
        coverage = frame[frame["metric"] == "coverage_3"]["value"]
        assert np.all((coverage >= 0.0) & (coverage <= 1.0))
        masked = frame[frame["metric"] == "masked_3"].groupby("replicate")["value"].sum()
        assert masked.tolist() == [10.0, 10.0]

    def test_recovery_study_flags(self):
        frame = metric_frame(run_study(study_config(StudyKind.RECOVERY, TINY_PLAN, TINY_SAMPLER)))
        assert set(frame["metric"]) == {"covers_tau2"} | {f"covers_mu_theta_{r}" for r in range(4)}
        assert set(frame["value"]) <= {0.0, 1.0}

    def test_fit_and_imputation_use_separate_streams(self, monkeypatch):
        entry_states = {"fit": set(), "impute": set()}
        real_chain, real_impute = studies.run_chain, studies.impute_missing

        def chain(*args, rng, **kwargs):
            entry_states["fit"].add(rng.bit_generator.state["state"]["state"])
            return real_chain(*args, rng=rng, **kwargs)

        def impute(*args, rng, **kwargs):
            entry_states["impute"].add(rng.bit_generator.state["state"]["state"])
            return real_impute(*args, rng=rng, **kwargs)

        monkeypatch.setattr(studies, "run_chain", chain)
        monkeypatch.setattr(studies, "impute_missing", impute)
        run_study(study_config(StudyKind.MISSING, TINY_PLAN, TINY_SAMPLER, bases=(3,), missing_count=10))
        assert len(entry_states["fit"]) == len(entry_states["impute"]) == 2
        assert not entry_states["fit"] & entry_states["impute"]

    def test_threads_do_not_change_results(self):
        config = study_config(StudyKind.STUDY1, TINY_PLAN, TINY_SAMPLER)
        serial = metric_frame(run_study(config, threads=1))
        parallel = metric_frame(run_study(config, threads=2))
        assert serial.equals(parallel)


DESK_SAMPLER = SamplerConfig(total_iterations=6_000, burn_in=2_000, thin=10)


@pytest.mark.slow
def test_study1_desk_scale_recovers_curves():
    plan = McPlan(replicates=10, n_sites=8, points_per_curve=60, master_seed=11)
    spreads = {}
    for scheme in (GapSchemeName.UNIFORM01, GapSchemeName.BETA12):
        frame = metric_frame(run_study(study_config(StudyKind.STUDY1, plan, DESK_SAMPLER, gap_scheme=scheme)))
        assert frame["value"].median() < 0.3
        by_replicate = frame.groupby("replicate")["value"]
        q1, q3 = by_replicate.quantile(0.25), by_replicate.quantile(0.75)
        spreads[scheme] = (q3 - q1) + (by_replicate.max() - by_replicate.min())
    steadier = spreads[GapSchemeName.BETA12] <= spreads[GapSchemeName.UNIFORM01]
    assert steadier.sum() >= 7


@pytest.mark.slow
def test_study2_more_bases_predict_better():
    plan = McPlan(replicates=10, n_sites=15, points_per_curve=200, master_seed=12)
    sampler = SamplerConfig(total_iterations=3_000, burn_in=1_000, thin=10)
    frame = metric_frame(run_study(study_config(StudyKind.STUDY2, plan, sampler, bases=(4, 12, 18))))
    heldout = frame[frame["metric"].str.startswith("heldout")].pivot_table(
        index="replicate", columns="metric", values="value", aggfunc="mean"
    )
    decreasing = (heldout["heldout_ise_4"] > heldout["heldout_ise_12"]) & (
        heldout["heldout_ise_12"] > heldout["heldout_ise_18"]
    )
    assert decreasing.sum() >= 8

    insample = frame[frame["metric"].str.startswith("insample")].pivot_table(
        index="replicate", columns="metric", values="value", aggfunc="mean"
    )
    assert (insample["insample_ise_delta_4"] < insample["insample_ise_no_delta_4"]).sum() >= 8


@pytest.mark.slow
def test_missing_values_are_covered():
    plan = McPlan(replicates=10, n_sites=15, points_per_curve=200, master_seed=13)
    sampler = SamplerConfig(total_iterations=3_000, burn_in=1_000, thin=10, store_full_delta=True)
    config = study_config(StudyKind.MISSING, plan, sampler, bases=(12, 18), missing_count=750)
    frame = metric_frame(run_study(config))
    summary = frame.groupby("metric")["value"].mean()
    assert summary["coverage_12"] >= 0.85 and summary["coverage_18"] >= 0.85
    assert summary["hpd_width_18"] < summary["hpd_width_12"]


@pytest.mark.slow
def test_parameter_recovery():
    plan = McPlan(replicates=20, n_sites=15, points_per_curve=200, master_seed=14)
    sampler = SamplerConfig(total_iterations=4_000, burn_in=1_000, thin=10)
    frame = metric_frame(run_study(study_config(StudyKind.RECOVERY, plan, sampler)))
    covered = frame.groupby("metric")["value"].sum()
    assert np.all(covered >= 16)
