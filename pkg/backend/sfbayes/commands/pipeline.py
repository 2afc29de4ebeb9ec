"""
Pipeline subcommands: simulate, fit, predict, report, study, preprocess-pm10 and config
"""

import argparse
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from sfbayes.commands import CommandRouter, argument
from sfbayes.config import settings
from sfbayes.exceptions import ConfigurationError, InputError
from sfbayes.models.basis import BasisSpec, default_interval
from sfbayes.schemas import PredictionRequest, PredictionSidecar, RunConfig
from sfbayes.utils import io
from sfbayes.utils.metrics import (
    MIN_DIAGNOSTIC_DRAWS,
    CurvePair,
    MetricRecord,
    boxplot_summary,
    chain_diagnostics,
    ise,
    threshold_report,
)
from sfbayes.utils.prediction import predict_curves, uniform_target_times
from sfbayes.utils.preprocessing import load_hourly, preprocess_pm10
from sfbayes.utils.sampler import run_chain
from sfbayes.utils.studies import run_study
from sfbayes.utils.synthetic import generate

logger = logging.getLogger(__name__)
router = CommandRouter()


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load --config (or defaults) and apply the global flag overrides"""
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    updates: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
        updates["sampler"] = config.sampler.model_copy(update={"seed": args.seed})
        plan = config.simulation.plan.model_copy(update={"master_seed": args.seed})
        updates["simulation"] = config.simulation.model_copy(update={"plan": plan})
    if getattr(args, "bases", None):
        if any(k < 1 for k in args.bases):
            raise ConfigurationError("every basis count must be at least 1")
        updates["bases"] = list(args.bases)
    if getattr(args, "out", None):
        updates["paths"] = config.paths.model_copy(update={"output_dir": Path(args.out)})
    if updates:
        config = config.model_copy(update=updates)
    if config.sampler.seed is None:
        config = config.model_copy(update={"sampler": config.sampler.model_copy(update={"seed": config.seed})})
    return config


def threads(args: argparse.Namespace) -> int:
    return max(1, getattr(args, "threads", None) or settings.THREADS)


def output_dir(config: RunConfig, *parts: str) -> Path:
    path = Path(config.paths.output_dir, *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _required(value: Optional[Path], flag: str) -> Path:
    if value is None:
        raise InputError(f"{flag} is required (flag or config paths)")
    path = Path(value)
    if not path.exists():
        raise InputError(f"Path does not exist: {path}")
    return path


@router.command(
    "simulate",
    help="Generate synthetic replicates with ground truth",
)
def cmd_simulate(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    replicates = generate(config.simulation)
    root = output_dir(config, "simulate")
    for replicate in replicates:
        folder = root / f"replicate_{replicate.index:03d}"
        io.save_dataset(replicate.dataset.sites, folder / "dataset.csv")
        io.save_truth(replicate.truth, folder / "truth.csv", folder / "held_out.csv")
    logger.info(f"Simulated {len(replicates)} replicates into {root}")
    return {"replicates": len(replicates), "directory": str(root)}


@router.command(
    "fit",
    help="Fit the model once per basis count and write draws plus manifest",
    arguments=[argument("--dataset", type=Path, help="Dataset CSV (overrides paths.dataset)")],
)
def cmd_fit(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    data = io.load_dataset(_required(args.dataset or config.paths.dataset, "--dataset"))
    interval = config.basis_interval or default_interval(s.times for s in data)

    def fit_one(n_bases: int) -> Dict[str, Any]:
        spec = BasisSpec.from_bases(n_bases, interval)
        draws = run_chain(data, spec, config.priors, config.sampler, kernel_family=config.kernel_family)
        folder = output_dir(config, "fit", f"bases_{n_bases}")
        io.write_draws(draws, folder)
        return {"directory": str(folder), "retained_draws": len(draws)}

    with ThreadPoolExecutor(max_workers=max(1, min(threads(args), len(config.bases)))) as pool:
        results = list(pool.map(fit_one, config.bases))
    return {"fits": {str(n_bases): info for n_bases, info in zip(config.bases, results)}}


@router.command(
    "predict",
    help="Predict curves at target coordinates from stored draws",
    arguments=[
        argument("--draws", type=Path, help="Directory holding draws.csv and manifest.json"),
        argument("--targets", type=Path, help="Target CSV site_id,x,y_coord[,t]"),
    ],
)
def cmd_predict(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    draws = io.read_draws(_required(args.draws or config.paths.draws_dir, "--draws"))
    targets = io.load_targets(_required(args.targets or config.paths.targets, "--targets"))
    prediction = config.prediction
    targets = [
        t if t.times else t.model_copy(update={"times": uniform_target_times(draws.spec, prediction.n_target_times)})
        for t in targets
    ]
    request = PredictionRequest(
        targets=targets,
        include_delta=prediction.include_delta,
        include_obs_noise=prediction.include_obs_noise,
        mass=prediction.mass,
        keep_samples=prediction.keep_samples,
    )
    curves = predict_curves(draws, request, rng=np.random.default_rng(config.seed))
    path = output_dir(config, "predict") / "predictions.csv"
    sidecar = PredictionSidecar(
        include_delta=request.include_delta,
        include_obs_noise=request.include_obs_noise,
        mass=request.mass,
        draw_count=len(draws),
        target_count=len(curves),
        site_ids=[c.site_id for c in curves],
    )
    io.write_predictions(curves, path, sidecar)
    return {"predictions": str(path), "targets": len(curves), "draws": len(draws)}


@router.command(
    "report",
    help="Threshold summaries, ISE tables, boxplot and band CSVs, chain diagnostics",
    arguments=[
        argument("--predictions", type=Path, help="Prediction CSV"),
        argument("--draws", type=Path, help="Draws directory for chain diagnostics"),
        argument("--truth", type=Path, help="Truth CSV for ISE against predictions"),
        argument("--metrics", type=Path, help="Metric table from a study run"),
    ],
)
def cmd_report(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    root = output_dir(config, "report")
    written: List[str] = []

    predictions_path = args.predictions or config.paths.predictions
    if predictions_path is not None:
        predictions = io.read_predictions(_required(predictions_path, "--predictions"))
        threshold_report(predictions, config.thresholds.as_dict()).to_csv(root / "thresholds.csv", index=False)
        predictions.to_csv(root / "bands.csv", index=False, float_format=io.FLOAT_FORMAT)
        written += ["thresholds.csv", "bands.csv"]

        truth_path = args.truth or config.paths.truth
        if truth_path is not None:
            truth = io.load_truth(_required(truth_path, "--truth"))
            records = []
            for site_id, group in predictions.groupby("site_id", sort=True):
                if site_id not in truth:
                    logger.warning(f"No truth for predicted site {site_id}")
                    continue
                target = np.interp(group["t"], truth[site_id]["t"], truth[site_id]["target"])
                value = ise(CurvePair(group["t"].to_numpy(), group["mean"].to_numpy(), target))
                records.append(MetricRecord(0, site_id, "ise", value))
            io.write_metric_table(records, root / "ise.csv")
            written.append("ise.csv")

    draws_path = args.draws or config.paths.draws_dir
    if draws_path is not None:
        draws = io.read_draws(_required(draws_path, "--draws"))
        if len(draws) >= MIN_DIAGNOSTIC_DRAWS:
            diagnostics = chain_diagnostics(draws.scalar_series(), draws.acceptance_rates())
            diagnostics.to_frame().to_csv(root / "diagnostics.csv", index=False, float_format=io.FLOAT_FORMAT)
            written.append("diagnostics.csv")
        else:
            logger.warning(f"Skipping diagnostics: {len(draws)} draws is below {MIN_DIAGNOSTIC_DRAWS}")

    if args.metrics is not None:
        table = pd.read_csv(
            _required(args.metrics, "--metrics"), dtype={"site_id": str}, float_precision="round_trip"
        )
        boxplot_summary(table).to_csv(root / "ise_boxplot.csv", index=False, float_format=io.FLOAT_FORMAT)
        written.append("ise_boxplot.csv")

    if not written:
        raise InputError("report needs --predictions, --draws or --metrics")
    return {"directory": str(root), "files": written}


@router.command("study", help="Run a Monte Carlo study (kind from simulation.study)")
def cmd_study(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    records = run_study(config, threads(args))
    path = output_dir(config, "study") / f"{config.simulation.study.value}_metrics.csv"
    io.write_metric_table(records, path)
    return {"metrics": str(path), "rows": len(records)}


@router.command(
    "preprocess-pm10",
    help="Aggregate hourly PM10 records into a dataset CSV",
    arguments=[argument("--hourly", type=Path, help="Hourly CSV site_id,x,y_coord,timestamp,value")],
)
def cmd_preprocess(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    raw = load_hourly(_required(args.hourly or config.paths.raw_hourly, "--hourly"))
    sites = preprocess_pm10(raw, log_transform=config.preprocessing.log_transform)
    path = output_dir(config, "pm10") / "dataset.csv"
    io.save_dataset(sites, path)
    return {
        "dataset": str(path),
        "sites": {s.site_id: {"valid": s.n_observed, "missing": int(s.missing.sum())} for s in sites},
    }


@router.command(
    "config",
    help="Configuration helpers",
    arguments=[
        argument("action", choices=["init"], help="init: write the fully defaulted run config"),
        argument("--path", type=Path, help="Target file (default <out>/run_config.json)"),
    ],
)
def cmd_config(args: argparse.Namespace) -> Dict[str, Any]:
    config = resolve_config(args)
    path = args.path or Path(config.paths.output_dir) / "run_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    config.dump(path)
    return {"config": str(path)}
