"""
File formats: datasets, truth bundles, draws, manifests, predictions, metric tables and errors
"""

import json
import logging
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from sfbayes.exceptions import InputError, SfBayesError
from sfbayes.models.basis import BasisSpec
from sfbayes.models.state import ModelState, SiteSeries
from sfbayes.schemas import PredictionSidecar, RunManifest, TargetSite
from sfbayes.utils.metrics import MetricRecord, metric_frame
from sfbayes.utils.prediction import PredictedCurve
from sfbayes.utils.sampler import PosteriorDraws
from sfbayes.utils.synthetic import TruthBundle

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.17g"
DATASET_COLUMNS = ["site_id", "x", "y_coord", "t", "value", "missing"]
SCALAR_COLUMNS = ["tau2", "nu2", "kappa2", "spatial_decay", "ar_decay"]

_THETA = re.compile(r"^theta_(\d+)_(\d+)$")
_DELTA = re.compile(r"^delta_(\d+)_(\d+)$")
_MU = re.compile(r"^mu_theta_(\d+)$")


def _read_csv(path: PathLike, what: str, **kwargs) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip", **kwargs)
    except pd.errors.EmptyDataError:
        raise InputError(f"{what} file {path} is empty")
    except (OSError, pd.errors.ParserError) as e:
        raise InputError(f"Cannot read {what} file {path}: {e}")
    if frame.empty:
        raise InputError(f"{what} file {path} has no rows")
    return frame


def _ensure_parent(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def load_dataset(path: PathLike) -> List[SiteSeries]:
    """
    Parse a dataset CSV (site_id,x,y_coord,t,value,missing)

    Returns:
        SiteSeries ordered by site_id; rows with missing=1 become masked points
    """
    frame = _read_csv(path, "Dataset", dtype={"site_id": str}, keep_default_na=True)
    if list(frame.columns) != DATASET_COLUMNS:
        raise InputError(
            f"Dataset header must be {','.join(DATASET_COLUMNS)}",
            details={"columns": list(frame.columns)},
        )
    frame["row"] = np.arange(len(frame)) + 2  # header is line 1

    for column in ("x", "y_coord", "t", "value", "missing"):
        numeric = pd.to_numeric(frame[column], errors="coerce")
        bad = numeric.isna() & frame[column].notna()
        if column != "value":
            bad |= numeric.isna()
        if bad.any():
            row = int(frame.loc[bad, "row"].iloc[0])
            raise InputError(f"Row {row}: column {column} is not numeric", details={"row": row, "column": column})
        frame[column] = numeric

    bad_flag = ~frame["missing"].isin([0, 1])
    if bad_flag.any():
        row = int(frame.loc[bad_flag, "row"].iloc[0])
        raise InputError(f"Row {row}: missing must be 0 or 1", details={"row": row})
    unusable = (frame["missing"] == 0) & ~np.isfinite(frame["value"])
    if unusable.any():
        row = int(frame.loc[unusable, "row"].iloc[0])
        raise InputError(f"Row {row}: unmasked value must be finite", details={"row": row})
    if frame["site_id"].isna().any():
        row = int(frame.loc[frame["site_id"].isna(), "row"].iloc[0])
        raise InputError(f"Row {row}: site_id is empty", details={"row": row})

    sites = []
    for site_id, group in frame.groupby("site_id", sort=True):
        if group[["x", "y_coord"]].drop_duplicates().shape[0] != 1:
            row = int(group["row"].iloc[1])
            raise InputError(f"Row {row}: coordinates of site {site_id} change", details={"row": row})
        steps = np.diff(group["t"].to_numpy())
        if np.any(steps <= 0):
            row = int(group["row"].iloc[int(np.argmax(steps <= 0)) + 1])
            raise InputError(
                f"Row {row}: times of site {site_id} must be strictly increasing",
                details={"row": row, "site_id": site_id},
            )
        sites.append(
            SiteSeries(
                site_id=site_id,
                coords=(float(group["x"].iloc[0]), float(group["y_coord"].iloc[0])),
                times=group["t"].to_numpy(dtype=float),
                values=group["value"].to_numpy(dtype=float),
                missing=group["missing"].to_numpy() == 1,
            )
        )
    logger.info(f"Loaded {len(sites)} sites from {path}")
    return sites


def save_dataset(data: Sequence[SiteSeries], path: PathLike) -> None:
    rows = []
    for s in sorted(data, key=lambda s: s.site_id):
        rows.append(
            pd.DataFrame(
                {
                    "site_id": s.site_id,
                    "x": s.coords[0],
                    "y_coord": s.coords[1],
                    "t": s.times,
                    "value": np.where(s.missing, np.nan, s.values),
                    "missing": s.missing.astype(int),
                }
            )
        )
    frame = pd.concat(rows, ignore_index=True)[DATASET_COLUMNS]
    frame.to_csv(_ensure_parent(path), index=False, float_format=FLOAT_FORMAT)


def save_truth(truth: TruthBundle, path: PathLike, held_out_path: Optional[PathLike] = None) -> None:
    """Noiseless targets per site, plus held-out masked values when present"""
    frame = pd.concat(
        [
            pd.DataFrame({"site_id": site_id, "t": t, "target": target})
            for site_id, t, target in zip(truth.site_ids, truth.times, truth.targets)
        ],
        ignore_index=True,
    )
    frame.to_csv(_ensure_parent(path), index=False, float_format=FLOAT_FORMAT)
    if held_out_path is not None and truth.held_out:
        held = pd.concat(
            [
                pd.DataFrame(
                    {
                        "site_id": h.site_id,
                        "index": h.indices,
                        "t": truth.times[truth.site_ids.index(h.site_id)][h.indices],
                        "value": h.values,
                    }
                )
                for h in truth.held_out
            ],
            ignore_index=True,
        )
        held.to_csv(_ensure_parent(held_out_path), index=False, float_format=FLOAT_FORMAT)


def load_truth(path: PathLike) -> Dict[str, pd.DataFrame]:
    """site_id -> frame with columns t, target"""
    frame = _read_csv(path, "Truth", dtype={"site_id": str})
    if not {"site_id", "t", "target"} <= set(frame.columns):
        raise InputError("Truth file needs columns site_id,t,target")
    return {site_id: group[["t", "target"]].reset_index(drop=True) for site_id, group in frame.groupby("site_id")}


# ---------------------------------------------------------------------------
# draws and manifests
# ---------------------------------------------------------------------------


def build_manifest(draws: PosteriorDraws) -> RunManifest:
    return RunManifest(
        seed=draws.seed,
        sampler=draws.config,
        priors=draws.priors,
        kernel_family=draws.kernel_family,
        degree=draws.spec.degree,
        interval=draws.spec.interval,
        site_ids=list(draws.site_ids),
        coords=[tuple(map(float, c)) for c in draws.coords],
        retained_draws=len(draws),
        acceptance_rates=draws.acceptance_rates(),
        wall_time_seconds=draws.wall_time,
        created_at=datetime.now(timezone.utc),
    )


def write_draws(draws: PosteriorDraws, directory: PathLike) -> Path:
    """
    Write draws.csv and manifest.json into directory

    Full delta chains are written only when the sampler config asks for them.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame = draws.to_frame(include_delta=draws.config.store_full_delta)
    frame.to_csv(directory / "draws.csv", index=False, float_format=FLOAT_FORMAT)
    (directory / "manifest.json").write_text(build_manifest(draws).model_dump_json(indent=2) + "\n")
    logger.info(f"Wrote {len(draws)} draws to {directory}")
    return directory / "draws.csv"


def read_manifest(path: PathLike) -> RunManifest:
    path = Path(path)
    try:
        return RunManifest.model_validate_json(path.read_text())
    except OSError as e:
        raise InputError(f"Cannot read manifest {path}: {e}")
    except ValueError as e:
        raise InputError(f"Invalid manifest {path}: {e}")


def read_draws(directory: PathLike) -> PosteriorDraws:
    """Rebuild PosteriorDraws from draws.csv and manifest.json"""
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.json")
    frame = _read_csv(directory / "draws.csv", "Draws")

    p1, m = manifest.degree + 1, len(manifest.site_ids)
    theta_cols = {c: _THETA.match(c) for c in frame.columns if _THETA.match(c)}
    mu_cols = sorted((c for c in frame.columns if _MU.match(c)), key=lambda c: int(_MU.match(c).group(1)))
    missing = [c for c in SCALAR_COLUMNS if c not in frame.columns]
    if len(theta_cols) != p1 * m or len(mu_cols) != p1 or missing:
        raise InputError(
            "Draws file does not match its manifest",
            details={"theta_columns": len(theta_cols), "expected": p1 * m, "missing": missing},
        )
    delta_cols: Dict[int, List[str]] = {}
    for c in frame.columns:
        match = _DELTA.match(c)
        if match:
            delta_cols.setdefault(int(match.group(1)), []).append(c)
    for j in delta_cols:
        delta_cols[j].sort(key=lambda c: int(_DELTA.match(c).group(2)))

    theta_index = [(int(mt.group(1)), int(mt.group(2)), c) for c, mt in theta_cols.items()]
    states = []
    for _, row in frame.iterrows():
        theta = np.empty((p1, m))
        for r, j, c in theta_index:
            theta[r, j] = row[c]
        delta = [
            row[delta_cols[j]].to_numpy(dtype=float) if j in delta_cols else np.zeros(0) for j in range(m)
        ]
        states.append(
            ModelState(
                theta=theta,
                mu_theta=row[mu_cols].to_numpy(dtype=float),
                delta=delta,
                **{name: float(row[name]) for name in SCALAR_COLUMNS},
            ).validate()
        )
    acceptance = {name: {"rate": rate} for name, rate in manifest.acceptance_rates.items()}
    return PosteriorDraws(
        states=states,
        log_joint=frame["log_joint"].to_numpy(dtype=float) if "log_joint" in frame else np.full(len(states), np.nan),
        acceptance=acceptance,
        spec=BasisSpec(manifest.degree, manifest.interval),
        site_ids=tuple(manifest.site_ids),
        coords=np.asarray(manifest.coords, dtype=float),
        kernel_family=manifest.kernel_family,
        config=manifest.sampler,
        priors=manifest.priors,
        seed=manifest.seed,
        wall_time=manifest.wall_time_seconds,
    )


# ---------------------------------------------------------------------------
# prediction targets and outputs
# ---------------------------------------------------------------------------


def load_targets(path: PathLike) -> List[TargetSite]:
    """
    Target sites from CSV site_id,x,y_coord[,t]

    Without a t column each target gets an empty time list to be filled by the caller.
    """
    frame = _read_csv(path, "Targets", dtype={"site_id": str})
    if not {"site_id", "x", "y_coord"} <= set(frame.columns):
        raise InputError("Targets file needs columns site_id,x,y_coord[,t]")
    targets = []
    try:
        for site_id, group in frame.groupby("site_id", sort=False):
            times = sorted(group["t"].astype(float).tolist()) if "t" in frame.columns else []
            targets.append(
                TargetSite(site_id=site_id, x=float(group["x"].iloc[0]), y=float(group["y_coord"].iloc[0]), times=times)
            )
    except ValueError as e:
        raise InputError(f"Invalid target rows in {path}: {e}")
    return targets


def write_predictions(curves: Sequence[PredictedCurve], path: PathLike, sidecar: PredictionSidecar) -> None:
    """Prediction CSV (site_id,t,mean,hpd_lo,hpd_hi) plus a JSON sidecar next to it"""
    path = _ensure_parent(path)
    frame = pd.concat([c.to_frame() for c in curves], ignore_index=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    path.with_suffix(".json").write_text(sidecar.model_dump_json(indent=2) + "\n")
    logger.info(f"Wrote {len(curves)} predicted curves to {path}")


def read_predictions(path: PathLike) -> pd.DataFrame:
    frame = _read_csv(path, "Predictions", dtype={"site_id": str})
    required = {"site_id", "t", "mean", "hpd_lo", "hpd_hi"}
    if not required <= set(frame.columns):
        raise InputError(f"Predictions file needs columns {','.join(sorted(required))}")
    return frame


def write_metric_table(records: Iterable[MetricRecord], path: PathLike) -> None:
    metric_frame(records).to_csv(_ensure_parent(path), index=False, float_format=FLOAT_FORMAT)


def write_error(error: SfBayesError, directory: Optional[PathLike]) -> Optional[Path]:
    """error.json under directory; failures to write are logged, never raised"""
    if directory is None:
        return None
    try:
        path = _ensure_parent(Path(directory) / "error.json")
        path.write_text(json.dumps(error.to_dict(), indent=2, default=str) + "\n")
        return path
    except OSError as e:
        logger.error(f"Could not write error file: {e}")
        return None
