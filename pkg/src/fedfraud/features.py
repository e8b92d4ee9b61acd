"""Feature engineering and standardization.

Layout (16 columns, debitor first then creditor within each group):

* log account age in minutes
* log last-activity gap in seconds
* haversine distance between physical location and tower, km
* raw amount
* activity events in the past 30 days (log1p by default, raw optionally)
* one-hot account type, 3 per participant (BUSINESS, CHECKING, SAVINGS)

One-hot columns pass through the scaler untouched.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import kernels
from .config import ACCOUNT_TYPES

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6334.08
LAYOUT_VERSION = 1
SD_CONVENTION = "population"
_SIDES = ("DEBITOR", "CREDITOR")


class LayoutError(ValueError):
    pass


def feature_layout(count_transform: str = "log") -> tuple:
    counts = "LOG_ACTIVITY_EVENTS" if count_transform == "log" else "ACTIVITY_EVENTS"
    names = []
    for group in ("LOG_ACCOUNT_AGE_MIN", "LOG_ACTIVITY_GAP_S", "TOWER_DISTANCE_KM", "AMOUNT", counts):
        names += [f"{side}_{group}" for side in _SIDES]
    for side in _SIDES:
        names += [f"{side}_IS_{a}" for a in ACCOUNT_TYPES]
    return tuple(names)


def is_onehot(name: str) -> bool:
    return "_IS_" in name


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows of engineered features with their column layout and source partition."""

    values: np.ndarray
    layout: tuple
    partition: str | None = None

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.layout):
            raise LayoutError(f"values shape {self.values.shape} does not match layout of {len(self.layout)}")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class ScalerParams:
    mean: np.ndarray
    sd: np.ndarray
    layout: tuple
    fitted_on: str
    convention: str = SD_CONVENTION

    def to_dict(self) -> dict:
        return {
            "layout_version": LAYOUT_VERSION,
            "convention": self.convention,
            "fitted_on": self.fitted_on,
            "features": list(self.layout),
            # repr of a float round-trips exactly through json
            "mean": [float(x) for x in self.mean],
            "sd": [float(x) for x in self.sd],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        if d.get("layout_version") != LAYOUT_VERSION:
            raise LayoutError(f"unsupported layout version {d.get('layout_version')}")
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["sd"], dtype=float),
                   tuple(d["features"]), d["fitted_on"], d.get("convention", SD_CONVENTION))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ScalerParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def haversine(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM):
    """Great-circle distance in km between points given in degrees."""
    for lat in (lat1, lat2):
        if np.any(np.abs(lat) > 90.0):
            raise ValueError("latitude outside [-90, 90]")
    for lon in (lon1, lon2):
        if np.any(np.abs(lon) > 180.0):
            raise ValueError("longitude outside [-180, 180]")
    return kernels.haversine(lat1, lon1, lat2, lon2, radius)


def _safe_log(x: np.ndarray, what: str, diagnostics: Counter | None) -> np.ndarray:
    # non-positive inputs are clamped to one unit; values in (0, 1) are legitimate
    bad = x <= 0
    if bad.any():
        if diagnostics is not None:
            diagnostics[f"clamped_{what}"] += int(bad.sum())
        x = np.where(bad, 1.0, x)
    return np.log(x)


def engineer_batch(records: pd.DataFrame, count_transform: str = "log", partition: str | None = None,
                   diagnostics: Counter | None = None) -> FeatureMatrix:
    t_init = records["PAYMENT_INIT_TIMESTAMP"].to_numpy(dtype=np.float64)
    cols = []
    for side in _SIDES:
        age_min = (t_init - records[f"{side}_ACCOUNT_CREATE_TIMESTAMP"].to_numpy(dtype=np.float64)) / 60.0
        cols.append(_safe_log(age_min, "age", diagnostics))
    for side in _SIDES:
        gap = t_init - records[f"{side}_ACCOUNT_LAST_ACTIVITY_TIMESTAMP"].to_numpy(dtype=np.float64)
        cols.append(_safe_log(gap, "gap", diagnostics))
    for side in _SIDES:
        cols.append(np.asarray(haversine(
            records[f"{side}_GEO_LATITUDE"].to_numpy(dtype=np.float64),
            records[f"{side}_GEO_LONGITUDE"].to_numpy(dtype=np.float64),
            records[f"{side}_TOWER_LATITUDE"].to_numpy(dtype=np.float64),
            records[f"{side}_TOWER_LONGITUDE"].to_numpy(dtype=np.float64),
        ), dtype=np.float64).reshape(-1))
    for side in _SIDES:
        cols.append(records[f"{side}_AMOUNT"].to_numpy(dtype=np.float64))
    for side in _SIDES:
        ev = records[f"{side}_ACCOUNT_ACTIVITY_EVENTS_PAST_30D"].to_numpy(dtype=np.float64)
        cols.append(np.log1p(ev) if count_transform == "log" else ev)
    for side in _SIDES:
        acct = records[f"{side}_ACCOUNT_TYPE"].to_numpy()
        for a in ACCOUNT_TYPES:
            cols.append((acct == a).astype(np.float64))
    values = np.column_stack(cols).reshape(len(records), -1)
    return FeatureMatrix(values, feature_layout(count_transform), partition)


def engineer_features(record: dict, count_transform: str = "log", diagnostics: Counter | None = None) -> FeatureMatrix:
    """Single-record convenience wrapper around :func:`engineer_batch`."""
    return engineer_batch(pd.DataFrame([record]), count_transform, diagnostics=diagnostics)


def fit_scaler(scaling_set: FeatureMatrix, partition: str | None = None,
               diagnostics: Counter | None = None) -> ScalerParams:
    """Per-feature mean / population sd; one-hot columns get (0, 1)."""
    part = partition if partition is not None else scaling_set.partition
    if part == "test":
        raise ValueError("refusing to fit a scaler on test-partition data")
    x = scaling_set.values
    if x.shape[0] == 0:
        raise ValueError("cannot fit a scaler on an empty set")
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    onehot = np.array([is_onehot(n) for n in scaling_set.layout])
    mean[onehot] = 0.0
    sd[onehot] = 1.0
    # a constant column can leave rounding noise (~1e-17) in the sd
    degenerate = ~(sd > 1e-12 * np.maximum(1.0, np.abs(mean))) & ~onehot
    if degenerate.any():
        names = [n for n, d in zip(scaling_set.layout, degenerate) if d]
        log.debug("degenerate features, sd set to 1: %s", names)
        if diagnostics is not None:
            diagnostics["degenerate_features"] += len(names)
        sd[degenerate] = 1.0
    return ScalerParams(mean, sd, tuple(scaling_set.layout), part or "unknown")


def apply_scaler(v: FeatureMatrix, s: ScalerParams) -> FeatureMatrix:
    """Standardize; not idempotent (applying twice shifts again)."""
    if tuple(v.layout) != tuple(s.layout):
        raise LayoutError("feature layout does not match scaler layout")
    return FeatureMatrix((v.values - s.mean) / s.sd, v.layout, v.partition)


def invert_scaler(v: FeatureMatrix, s: ScalerParams) -> FeatureMatrix:
    if tuple(v.layout) != tuple(s.layout):
        raise LayoutError("feature layout does not match scaler layout")
    return FeatureMatrix(v.values * s.sd + s.mean, v.layout, v.partition)
