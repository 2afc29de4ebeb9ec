"""
PM10 preprocessing
Hourly station records to irregularly spaced, day-indexed curves
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from sfbayes.exceptions import InputError
from sfbayes.models.state import SiteSeries

logger = logging.getLogger(__name__)

HOURLY_COLUMNS = ["site_id", "x", "y_coord", "timestamp", "value"]

# (upper bound of missing fraction, window hours); bounds are upper-inclusive
CATEGORY_TABLE: Tuple[Tuple[float, int], ...] = (
    (0.20, 24),
    (0.40, 24),
    (0.60, 48),
    (0.80, 72),
    (1.00, 120),
)


@dataclass(frozen=True)
class MissingCategory:
    month: int
    fraction: float
    lower: float
    upper: float
    window_hours: int

    @property
    def window_days(self) -> float:
        return self.window_hours / 24.0


def missing_category(fraction: float, month: int = 0) -> MissingCategory:
    """Aggregation window for a month's missing fraction in [0, 1]"""
    if not 0.0 <= fraction <= 1.0:
        raise InputError(f"Missing fraction must lie in [0, 1], got {fraction}")
    lower = 0.0
    for upper, hours in CATEGORY_TABLE:
        # tolerate rounding when fractions come from hour counts
        if fraction <= upper + 1e-12:
            return MissingCategory(month, fraction, lower, upper, hours)
        lower = upper
    raise InputError(f"Missing fraction {fraction} matched no category")


@dataclass
class RawHourlySeries:
    """One station-year of hourly values; NaN marks a missing hour"""

    site_id: str
    coords: Tuple[float, float]
    timestamps: pd.DatetimeIndex
    values: np.ndarray

    def __post_init__(self):
        self.site_id = str(self.site_id)
        self.timestamps = pd.DatetimeIndex(self.timestamps)
        self.values = np.asarray(self.values, dtype=float)
        if self.timestamps.size != self.values.size:
            raise InputError(f"Site {self.site_id}: timestamps and values differ in length")
        if self.timestamps.size == 0:
            raise InputError(f"Site {self.site_id}: no hourly records")
        start = self.timestamps[0]
        if (start.month, start.day, start.hour, start.minute) != (1, 1, 0, 0):
            raise InputError(f"Site {self.site_id}: records must start at January 1, 00:00")
        expected = pd.date_range(start, periods=self.expected_slots, freq="h")
        if self.timestamps.size != expected.size or not self.timestamps.equals(expected):
            raise InputError(
                f"Site {self.site_id}: expected {self.expected_slots} contiguous hourly slots",
                details={"site_id": self.site_id, "slots": int(self.timestamps.size)},
            )

    @property
    def year(self) -> int:
        return int(self.timestamps[0].year)

    @property
    def expected_slots(self) -> int:
        start = pd.Timestamp(year=self.timestamps[0].year, month=1, day=1)
        return int((start + pd.DateOffset(years=1) - start) / pd.Timedelta(hours=1))

    def as_series(self) -> pd.Series:
        return pd.Series(self.values, index=self.timestamps)


def _site_points(raw: RawHourlySeries) -> Tuple[List[float], List[float], List[bool]]:
    series = raw.as_series()
    jan1 = pd.Timestamp(year=raw.year, month=1, day=1)
    times, values, missing = [], [], []
    for month in range(1, 13):
        block = series[series.index.month == month]
        category = missing_category(float(block.isna().mean()), month)
        window = category.window_hours
        for offset in range(0, block.size, window):
            chunk = block.iloc[offset : offset + window]
            valid = chunk.dropna()
            if valid.empty and chunk.size < window:
                continue
            times.append((chunk.index[0] - jan1) / pd.Timedelta(days=1))
            values.append(float(valid.median()) if not valid.empty else np.nan)
            missing.append(valid.empty)
    return times, values, missing


def preprocess_pm10(raw: Sequence[RawHourlySeries], log_transform: bool = True) -> List[SiteSeries]:
    """
    Aggregate hourly records into day-indexed curves

    Per site and month the missing fraction picks a window length; each window
    from the first hour of the month yields the median of its non-missing hours
    at t = days since January 1 of the window start. Windows with no valid hour
    become masked points; a trailing partial window with no valid hour is dropped.

    Args:
        raw: Station-years of hourly data
        log_transform: Take the natural log of every median

    Returns:
        SiteSeries per station, ordered by site_id
    """
    if not raw:
        raise InputError("No hourly series to preprocess")
    result = []
    for station in sorted(raw, key=lambda s: s.site_id):
        times, values, missing = _site_points(station)
        values = np.asarray(values, dtype=float)
        missing = np.asarray(missing, dtype=bool)
        if log_transform:
            bad = ~missing & (values <= 0)
            if bad.any():
                logger.warning(f"Site {station.site_id}: masking {int(bad.sum())} non-positive medians before log")
                missing |= bad
            values = np.where(missing, np.nan, np.log(np.where(missing, 1.0, values)))
        logger.info(
            f"Site {station.site_id}: {int((~missing).sum())} valid and {int(missing.sum())} missing points"
        )
        result.append(SiteSeries(station.site_id, station.coords, np.asarray(times), values, missing))
    return result


def load_hourly(path: Union[str, Path]) -> List[RawHourlySeries]:
    """
    Read hourly records from CSV with header site_id,x,y_coord,timestamp,value

    Empty values mark missing hours.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"site_id": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise InputError(f"Hourly file {path} is empty")
    except (OSError, pd.errors.ParserError) as e:
        raise InputError(f"Cannot parse hourly file {path}: {e}")
    if list(frame.columns) != HOURLY_COLUMNS:
        raise InputError(
            f"Hourly file {path} must have header {','.join(HOURLY_COLUMNS)}",
            details={"columns": list(frame.columns)},
        )
    if frame.empty:
        raise InputError(f"Hourly file {path} has no rows")
    try:
        frame["timestamp"] = pd.to_datetime(frame["timestamp"])
        frame["value"] = pd.to_numeric(frame["value"])
    except (ValueError, TypeError) as e:
        raise InputError(f"Malformed timestamp or value in {path}: {e}")

    series = []
    for site_id, group in frame.groupby("site_id", sort=True):
        coords = group[["x", "y_coord"]].drop_duplicates()
        if len(coords) != 1:
            raise InputError(f"Site {site_id}: coordinates change between rows")
        group = group.sort_values("timestamp")
        series.append(
            RawHourlySeries(
                site_id=site_id,
                coords=(float(coords.iloc[0, 0]), float(coords.iloc[0, 1])),
                timestamps=pd.DatetimeIndex(group["timestamp"]),
                values=group["value"].to_numpy(dtype=float),
            )
        )
    return series


def save_hourly(raw: Sequence[RawHourlySeries], path: Union[str, Path]) -> None:
    frames = [
        pd.DataFrame(
            {
                "site_id": s.site_id,
                "x": s.coords[0],
                "y_coord": s.coords[1],
                "timestamp": s.timestamps.strftime("%Y-%m-%d %H:%M:%S"),
                "value": s.values,
            }
        )
        for s in raw
    ]
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
