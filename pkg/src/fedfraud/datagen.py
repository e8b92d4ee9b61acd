"""Synthetic multi-site payment data with injected, composable anomalies.

A site's dataset is produced in four stages, each on its own RNG substream:

1. ``generate_base_records`` draws clean payments (FRAUD_FLAG = 0).
2. ``partition_dataset`` splits them into scaling / train / test.
3. Every partition gets anomalies: for each anomaly type it is exposed to,
   ``select_fraud_rows`` picks rows (some already flagged, controlled by the
   overlap fraction) and ``inject_anomaly`` rewrites them.
4. ``apply_label_noise`` flips a fraction of the fraud labels back to 0.

Records are rows of a :class:`pandas.DataFrame` whose columns are ``COLUMNS``;
``inject_anomaly`` works on a single row as a plain ``dict``.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import _tables
from .config import (
    ACCOUNT_TYPES,
    ConfigError,
    FederationConfig,
    LogNormalSpec,
    SiteConfig,
    config_hash,
    derive_seed,
)

log = logging.getLogger(__name__)

PARTITIONS = ("scaling", "train", "test")

SECONDS_PER_DAY = 86_400
SECONDS_PER_WEEK = 7 * SECONDS_PER_DAY
SECONDS_PER_YEAR = 365 * SECONDS_PER_DAY

# [low, high) activity-event ranges in the past 30 days
ACTIVITY_NORMAL = {"BUSINESS": (50, 1_500_000), "CHECKING": (2, 500), "SAVINGS": (2, 50)}
ACTIVITY_ELEVATED = {"BUSINESS": (1_000_000, 5_000_000), "CHECKING": (525, 2000), "SAVINGS": (75, 2000)}

TYPE2_HOURS = (0, 1, 2, 3, 4, 5)
TYPE2_MINUTES = (0, 1, 4, 9, 16, 25)
TYPE2_SECONDS = (1, 10, 20, 30, 40, 50)
TYPE3_DAYS = (90, 120, 150, 180)

LAT_RANGE = (-90.0, 90.0)
LON_RANGE = (-180.0, 180.0)

_PARTY_FIELDS = (
    "ID",
    "NAME",
    "DOB_TIMESTAMP",
    "CITY",
    "GEO_LATITUDE",
    "GEO_LONGITUDE",
    "TOWER_LATITUDE",
    "TOWER_LONGITUDE",
    "ACCOUNT_TYPE",
    "ACCOUNT_CREATE_TIMESTAMP",
    "ACCOUNT_LAST_ACTIVITY_TIMESTAMP",
    "ACCOUNT_ACTIVITY_EVENTS_PAST_30D",
    "CURRENCY",
    "AMOUNT",
)
COLUMNS = (
    ("TRANSACTION_ID", "SITE_ID", "PAYMENT_INIT_TIMESTAMP")
    + tuple(f"DEBITOR_{f}" for f in _PARTY_FIELDS)
    + tuple(f"CREDITOR_{f}" for f in _PARTY_FIELDS)
    + ("FRAUD_FLAG", "ANOMALY_TYPES")
)
TIMESTAMP_COLUMNS = tuple(c for c in COLUMNS if c.endswith("_TIMESTAMP"))
INT_COLUMNS = (
    "FRAUD_FLAG",
    "DEBITOR_ACCOUNT_ACTIVITY_EVENTS_PAST_30D",
    "CREDITOR_ACCOUNT_ACTIVITY_EVENTS_PAST_30D",
) + TIMESTAMP_COLUMNS


@dataclass
class DatasetPartitions:
    scaling: pd.DataFrame
    train: pd.DataFrame
    test: pd.DataFrame

    def __iter__(self):
        return iter((self.scaling, self.train, self.test))

    def items(self):
        return zip(PARTITIONS, self)


def _round_ceil(x: float) -> int:
    # 200000 * 0.006 is 1200.0000000000002 in binary floating point
    return math.ceil(round(x, 9))


def _round_floor(x: float) -> int:
    return math.floor(round(x, 9))


def lognormal_params(spec: LogNormalSpec) -> tuple[float, float]:
    """Underlying ``(mu, sigma^2)`` of a log-normal with the given arithmetic mean and sd."""
    if not spec.mean_arith > 0:
        raise ConfigError("log-normal mean must be positive")
    sigma_sq = math.log1p((spec.sd_arith / spec.mean_arith) ** 2)
    mu = math.log(spec.mean_arith) - sigma_sq / 2.0
    return mu, sigma_sq


def sample_lognormal(spec: LogNormalSpec, size, rng: np.random.Generator) -> np.ndarray:
    mu, sigma_sq = lognormal_params(spec)
    return rng.lognormal(mu, math.sqrt(sigma_sq), size)


def parse_types(tags: str) -> frozenset:
    return frozenset(int(t) for t in tags.split("|") if t) if tags else frozenset()


def format_types(types) -> str:
    return "|".join(str(t) for t in sorted(types))


def _party(rng, n, config: SiteConfig, clock_now: int, prefix: str, site_tag: str) -> dict:
    """Draw one participant side (debitor or creditor) for ``n`` records."""
    acct = np.asarray(ACCOUNT_TYPES)[rng.integers(0, 3, n)]
    city_idx = rng.integers(0, len(_tables.CITIES), n)
    cities = np.asarray([c[0] for c in _tables.CITIES])[city_idx]
    lat = np.asarray([c[1] for c in _tables.CITIES])[city_idx] + rng.uniform(-0.05, 0.05, n)
    lon = np.asarray([c[2] for c in _tables.CITIES])[city_idx] + rng.uniform(-0.05, 0.05, n)
    lo, hi = config.tower_perturbation
    tower_lat = np.clip(lat + rng.uniform(lo, hi, n), *LAT_RANGE)
    tower_lon = np.clip(lon + rng.uniform(lo, hi, n), *LON_RANGE)

    dob = rng.integers(clock_now - 80 * SECONDS_PER_YEAR, clock_now - 18 * SECONDS_PER_YEAR, n)
    # creation in (dob, now - 12w]
    create = dob + 1 + (rng.random(n) * ((clock_now - 12 * SECONDS_PER_WEEK) - dob)).astype(np.int64)
    # last activity in [max(create, now - 1w), now]
    floor_ = np.maximum(create, clock_now - SECONDS_PER_WEEK)
    last = floor_ + (rng.random(n) * (clock_now - floor_ + 1)).astype(np.int64)

    events = np.empty(n, dtype=np.int64)
    for a, (elo, ehi) in ACTIVITY_NORMAL.items():
        m = acct == a
        events[m] = rng.integers(elo, ehi, int(m.sum()))

    first = rng.integers(0, len(_tables.FIRST_NAMES), n)
    last_name = rng.integers(0, len(_tables.LAST_NAMES), n)
    names = [f"{_tables.FIRST_NAMES[i]} {_tables.LAST_NAMES[j]}" for i, j in zip(first, last_name)]
    ids = [f"{site_tag}-{prefix[0]}{k:08d}" for k in rng.integers(0, 10**8, n)]

    home = rng.random(n) < _tables.HOME_CURRENCY_PROB
    other = np.asarray(_tables.CURRENCIES)[rng.integers(0, len(_tables.CURRENCIES), n)]
    currency = np.where(home, "USD", other)
    return {
        "ID": ids,
        "NAME": names,
        "DOB_TIMESTAMP": dob,
        "CITY": cities,
        "GEO_LATITUDE": lat,
        "GEO_LONGITUDE": lon,
        "TOWER_LATITUDE": tower_lat,
        "TOWER_LONGITUDE": tower_lon,
        "ACCOUNT_TYPE": acct,
        "ACCOUNT_CREATE_TIMESTAMP": create,
        "ACCOUNT_LAST_ACTIVITY_TIMESTAMP": last,
        "ACCOUNT_ACTIVITY_EVENTS_PAST_30D": events,
        "CURRENCY": currency,
    }


def generate_base_records(config: SiteConfig, clock_now: int, rng: np.random.Generator | None = None) -> pd.DataFrame:
    """Clean payment records for one site; every FRAUD_FLAG is 0."""
    if rng is None:
        rng = np.random.default_rng(derive_seed(config.seed, "base"))
    n = config.n_records
    tag = config.site_id.replace("site-", "")
    deb = _party(rng, n, config, clock_now, "DEBITOR", tag)
    cred = _party(rng, n, config, clock_now, "CREDITOR", tag)

    amount = np.empty(n)
    for a in ACCOUNT_TYPES:
        m = deb["ACCOUNT_TYPE"] == a
        amount[m] = sample_lognormal(config.amount_normal[a], int(m.sum()), rng)
    deb["AMOUNT"] = amount
    cred["AMOUNT"] = amount * np.array(
        [_tables.exchange_rate(s, d) for s, d in zip(deb["CURRENCY"], cred["CURRENCY"])]
    )

    lo = np.maximum(deb["ACCOUNT_LAST_ACTIVITY_TIMESTAMP"], cred["ACCOUNT_LAST_ACTIVITY_TIMESTAMP"])
    init = lo + (rng.random(n) * (clock_now - lo + 1)).astype(np.int64)

    cols = {
        "TRANSACTION_ID": [f"{config.site_id}-{i:07d}" for i in range(n)],
        "SITE_ID": [config.site_id] * n,
        "PAYMENT_INIT_TIMESTAMP": init,
    }
    cols.update({f"DEBITOR_{k}": v for k, v in deb.items()})
    cols.update({f"CREDITOR_{k}": v for k, v in cred.items()})
    cols["FRAUD_FLAG"] = np.zeros(n, dtype=np.int64)
    cols["ANOMALY_TYPES"] = [""] * n
    return pd.DataFrame(cols, columns=list(COLUMNS))


def _displace(c: float, c_range: tuple, push: float, rng, diagnostics: Counter | None) -> float:
    """Move a coordinate toward one extreme of its valid range.

    With ``delta = (c_max - c) + push`` the upper candidate is
    ``(c_max - delta, c_max)``; the lower one mirrors it from ``c_min``. A
    negative push keeps the new value at least ``|push|`` away from ``c``.
    """
    c_min, c_max = c_range
    upper = (c - push, c_max)
    lower = (c_min, c + push)
    sides = [upper, lower]
    if rng.random() < 0.5:
        sides.reverse()
    for lo, hi in sides:
        lo, hi = max(lo, c_min), min(hi, c_max)
        if lo < hi:
            return float(rng.uniform(lo, hi))
    if diagnostics is not None:
        diagnostics["type1_clamped"] += 1
    # push wider than the range: land on the farther extreme
    return c_max if c_max - c >= c - c_min else c_min


def immature_create_timestamp(t_init: int, hours: int, minutes: int, seconds: int) -> int:
    return int(t_init) - (hours * 3600 + minutes * 60 + seconds)


def dormant_last_activity(t_init: int, days: int, jitter: int) -> int:
    return int(t_init) - days * SECONDS_PER_DAY - int(jitter)


def inject_anomaly(record: dict, anomaly_type: int, config: SiteConfig, rng: np.random.Generator,
                   diagnostics: Counter | None = None) -> dict:
    """Apply one anomaly rule to a record and flag it; returns a new dict."""
    r = dict(record)
    if anomaly_type == 1:
        p = config.type1_push_factor
        for side in ("DEBITOR", "CREDITOR"):
            r[f"{side}_TOWER_LATITUDE"] = _displace(r[f"{side}_TOWER_LATITUDE"], LAT_RANGE, p, rng, diagnostics)
            r[f"{side}_TOWER_LONGITUDE"] = _displace(r[f"{side}_TOWER_LONGITUDE"], LON_RANGE, p, rng, diagnostics)
    elif anomaly_type == 2:
        h = int(rng.choice(TYPE2_HOURS))
        m = int(rng.choice(TYPE2_MINUTES))
        s = int(rng.choice(TYPE2_SECONDS))
        created = immature_create_timestamp(r["PAYMENT_INIT_TIMESTAMP"], h, m, s)
        r["DEBITOR_ACCOUNT_CREATE_TIMESTAMP"] = created
        # no activity can predate the account
        r["DEBITOR_ACCOUNT_LAST_ACTIVITY_TIMESTAMP"] = max(int(r["DEBITOR_ACCOUNT_LAST_ACTIVITY_TIMESTAMP"]), created)
        spec = config.amount_anomalous[r["DEBITOR_ACCOUNT_TYPE"]]
        amount = float(sample_lognormal(spec, None, rng))
        r["DEBITOR_AMOUNT"] = amount
        r["CREDITOR_AMOUNT"] = amount * _tables.exchange_rate(r["DEBITOR_CURRENCY"], r["CREDITOR_CURRENCY"])
    elif anomaly_type == 3:
        d = int(rng.choice(TYPE3_DAYS))
        jitter = int(rng.integers(0, SECONDS_PER_DAY))
        last = dormant_last_activity(r["PAYMENT_INIT_TIMESTAMP"], d, jitter)
        r["DEBITOR_ACCOUNT_LAST_ACTIVITY_TIMESTAMP"] = last
        # an account cannot be active before it exists
        r["DEBITOR_ACCOUNT_CREATE_TIMESTAMP"] = min(int(r["DEBITOR_ACCOUNT_CREATE_TIMESTAMP"]), last)
    elif anomaly_type == 4:
        lo, hi = ACTIVITY_ELEVATED[r["DEBITOR_ACCOUNT_TYPE"]]
        r["DEBITOR_ACCOUNT_ACTIVITY_EVENTS_PAST_30D"] = int(rng.integers(lo, hi))
    else:
        raise ValueError(f"unknown anomaly type {anomaly_type}")
    r["FRAUD_FLAG"] = 1
    r["ANOMALY_TYPES"] = format_types(parse_types(r.get("ANOMALY_TYPES", "")) | {anomaly_type})
    return r


def select_fraud_rows(dataset_size: int, alpha: float, beta: float, flagged_indices, rng: np.random.Generator,
                      diagnostics: Counter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pick rows to receive an anomaly: ``n_F`` already flagged, ``n_N`` clean.

    ``n_F = ceil(ceil(|D| alpha) beta)`` and ``n_N = ceil(|D| alpha) - n_F``.
    When fewer than ``n_F`` flagged rows exist, all of them are taken and the
    shortfall is drawn from clean rows instead.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    flagged = np.unique(np.asarray(flagged_indices, dtype=np.int64))
    if flagged.size and (flagged[0] < 0 or flagged[-1] >= dataset_size):
        raise ValueError("flagged indices out of range")
    total = _round_ceil(dataset_size * alpha)
    n_f = _round_ceil(total * beta)
    if n_f > flagged.size:
        log.debug("only %d flagged rows for n_F=%d", flagged.size, n_f)
        if diagnostics is not None:
            diagnostics["overlap_shortfall"] += n_f - flagged.size
        n_f = int(flagged.size)
    n_n = total - n_f
    clean = np.setdiff1d(np.arange(dataset_size), flagged, assume_unique=True)
    if n_n > clean.size:
        if diagnostics is not None:
            diagnostics["clean_shortfall"] += n_n - clean.size
        n_n = int(clean.size)
    from_flagged = rng.choice(flagged, n_f, replace=False) if n_f else np.empty(0, dtype=np.int64)
    from_clean = rng.choice(clean, n_n, replace=False) if n_n else np.empty(0, dtype=np.int64)
    return from_flagged, from_clean


def apply_label_noise(records: pd.DataFrame, p_apply: float, rng: np.random.Generator,
                      diagnostics: Counter | None = None) -> pd.DataFrame:
    """Flip ``floor((1 - p_apply) * n_flagged)`` random fraud labels to 0.

    Feature values (and the anomaly provenance column) are left untouched.
    """
    if not 0.0 < p_apply <= 1.0:
        raise ValueError("p_apply must lie in (0, 1]")
    out = records.copy()
    flagged = np.flatnonzero(out["FRAUD_FLAG"].to_numpy() == 1)
    n_flip = _round_floor((1.0 - p_apply) * flagged.size)
    if n_flip:
        flip = rng.choice(flagged, n_flip, replace=False)
        out.iloc[flip, out.columns.get_loc("FRAUD_FLAG")] = 0
        if diagnostics is not None:
            diagnostics["labels_flipped"] += n_flip
    return out


def partition_dataset(records: pd.DataFrame, ratios=(0.2, 0.6, 0.2), seed: int = 0) -> DatasetPartitions:
    """Shuffle and split into disjoint scaling / train / test partitions."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"partition ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(records)
    n_scaling = int(round(n * ratios[0]))
    n_train = int(round(n * ratios[1]))
    n_test = n - n_scaling - n_train
    if min(n_scaling, n_train, n_test) < 1:
        raise ConfigError(f"partition of {n} rows by {ratios} leaves an empty split")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.split(perm, [n_scaling, n_scaling + n_train])
    return DatasetPartitions(*(records.iloc[p].reset_index(drop=True) for p in parts))


def inject_partition(records: pd.DataFrame, types, config: SiteConfig, rng: np.random.Generator,
                     diagnostics: Counter | None = None) -> pd.DataFrame:
    """Run row selection + injection for each anomaly type in turn.

    The fraud fraction is split evenly across the partition's anomaly types so
    the total stays near ``config.fraud_fraction``.
    """
    out = records.copy()
    types = sorted(types)
    if not types:
        return out
    alpha = config.fraud_fraction / len(types)
    for k in types:
        flagged = np.flatnonzero(out["FRAUD_FLAG"].to_numpy() == 1)
        from_flagged, from_clean = select_fraud_rows(
            len(out), alpha, config.overlap_fraction, flagged, rng, diagnostics
        )
        idx = np.concatenate([from_flagged, from_clean])
        if not idx.size:
            continue
        rows = out.iloc[idx].to_dict("records")
        new = [inject_anomaly(r, k, config, rng, diagnostics) for r in rows]
        out.iloc[idx] = pd.DataFrame(new, columns=out.columns).astype(out.dtypes.to_dict()).to_numpy()
    return out.astype(records.dtypes.to_dict())


def generate_site(config: SiteConfig, clock_now: int, ratios=(0.2, 0.6, 0.2)) -> tuple[DatasetPartitions, Counter]:
    """Full pipeline for one site. Deterministic in ``config`` (which carries the seed)."""
    diagnostics: Counter = Counter()
    base = generate_base_records(config, clock_now)
    parts = partition_dataset(base, ratios, seed=derive_seed(config.seed, "partition"))
    out = {}
    for name, df in parts.items():
        types = config.anomaly_types_eval if name == "test" else config.anomaly_types_train
        rng = np.random.default_rng(derive_seed(config.seed, "inject", name))
        df = inject_partition(df, types, config, rng, diagnostics)
        rng = np.random.default_rng(derive_seed(config.seed, "noise", name))
        out[name] = apply_label_noise(df, config.label_apply_prob, rng, diagnostics)
    if diagnostics:
        log.info("%s generation diagnostics: %s", config.site_id, dict(diagnostics))
    return DatasetPartitions(**out), diagnostics


def generate_federation(config: FederationConfig) -> dict[str, DatasetPartitions]:
    return {s.site_id: generate_site(s, config.clock_now, config.partition_ratios)[0] for s in config.sites}


# -- CSV / manifest ---------------------------------------------------------

_ISO = "%Y-%m-%dT%H:%M:%SZ"


def to_csv(records: pd.DataFrame, path) -> None:
    out = records.copy()
    for c in TIMESTAMP_COLUMNS:
        out[c] = pd.to_datetime(out[c], unit="s", utc=True).dt.strftime(_ISO)
    out.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def read_csv(path) -> pd.DataFrame:
    df = pd.read_csv(
        path,
        dtype={"ANOMALY_TYPES": str},
        keep_default_na=False,
        na_values={c: [] for c in COLUMNS},
        float_precision="round_trip",
        encoding="utf-8",
    )
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    for c in TIMESTAMP_COLUMNS:
        df[c] = pd.to_datetime(df[c], format=_ISO, utc=True).astype("int64") // 10**9
    for c in INT_COLUMNS:
        df[c] = df[c].astype(np.int64)
    return df[list(COLUMNS)]


def csv_path(data_dir, site_id: str, partition: str) -> Path:
    return Path(data_dir) / f"{site_id}_{partition}.csv"


def load_site(data_dir, site_id: str) -> DatasetPartitions:
    return DatasetPartitions(*(read_csv(csv_path(data_dir, site_id, p)) for p in PARTITIONS))


def site_summary(parts: DatasetPartitions) -> dict:
    rows = {name: int(len(df)) for name, df in parts.items()}
    fraud = {name: int(df["FRAUD_FLAG"].sum()) for name, df in parts.items()}
    tt_rows = rows["train"] + rows["test"]
    tt_fraud = fraud["train"] + fraud["test"]
    amounts = pd.concat([parts.train["DEBITOR_AMOUNT"], parts.test["DEBITOR_AMOUNT"]])
    return {
        "rows": rows,
        "fraud": fraud,
        "fraud_rate": tt_fraud / tt_rows,
        "mean_amount_usd": float(amounts.mean()),
    }


def write_dataset(config: FederationConfig, data_dir) -> dict:
    """Generate every site, write one CSV per (site, partition) and a manifest."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config_hash(config.data_dict()),
        "seed": config.seed,
        "clock_now": config.clock_now,
        "sites": {},
        "files": [],
    }
    for site in config.sites:
        parts, diag = generate_site(site, config.clock_now, config.partition_ratios)
        for name, df in parts.items():
            path = csv_path(data_dir, site.site_id, name)
            to_csv(df, path)
            manifest["files"].append(path.name)
        entry = site_summary(parts)
        entry["seed"] = site.seed
        entry["diagnostics"] = dict(sorted(diag.items()))
        manifest["sites"][site.site_id] = entry
    (data_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())
