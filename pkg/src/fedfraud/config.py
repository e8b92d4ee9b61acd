"""Experiment configuration: site parameters, training, privacy, federation.

Everything that influences an output lives in one of these dataclasses, so
a config hash over their canonical JSON identifies a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

ACCOUNT_TYPES = ("BUSINESS", "CHECKING", "SAVINGS")
ANOMALY_TYPES = (1, 2, 3, 4)
ALGORITHMS = ("fedavg", "fedprox", "fedopt", "local", "central")
# 2025-01-01T00:00:00Z
DEFAULT_CLOCK_NOW = 1735689600


class ConfigError(ValueError):
    """Raised when a configuration fails validation."""


def derive_seed(master_seed: int, *keys: Any) -> int:
    """Stable 64-bit seed from a master seed and a path of keys.

    Independent of process, platform and hash randomization, so in-process and
    multi-process runs draw identical streams.
    """
    text = json.dumps([int(master_seed), *[str(k) for k in keys]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class LogNormalSpec:
    mean_arith: float
    sd_arith: float

    def __post_init__(self):
        if not (self.mean_arith > 0 and math.isfinite(self.mean_arith)):
            raise ConfigError(f"log-normal mean must be positive, got {self.mean_arith}")
        if not (self.sd_arith >= 0 and math.isfinite(self.sd_arith)):
            raise ConfigError(f"log-normal sd must be non-negative, got {self.sd_arith}")


def _spec_map(d, what) -> dict[str, LogNormalSpec]:
    out = {}
    for acct in ACCOUNT_TYPES:
        if acct not in d:
            raise ConfigError(f"{what} missing account type {acct}")
        v = d[acct]
        out[acct] = v if isinstance(v, LogNormalSpec) else LogNormalSpec(**v)
    return out


@dataclass(frozen=True)
class SiteConfig:
    site_id: str
    n_records: int
    amount_normal: dict
    amount_anomalous: dict
    tower_perturbation: tuple = (-0.75, 1.25)
    type1_push_factor: float = -2.0
    anomaly_types_train: tuple = (1,)
    anomaly_types_eval: tuple = ANOMALY_TYPES
    fraud_fraction: float = 0.006
    overlap_fraction: float = 0.1
    label_apply_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "amount_normal", _spec_map(self.amount_normal, "amount_normal"))
        object.__setattr__(self, "amount_anomalous", _spec_map(self.amount_anomalous, "amount_anomalous"))
        object.__setattr__(self, "tower_perturbation", tuple(float(x) for x in self.tower_perturbation))
        object.__setattr__(self, "anomaly_types_train", tuple(sorted(set(int(t) for t in self.anomaly_types_train))))
        object.__setattr__(self, "anomaly_types_eval", tuple(sorted(set(int(t) for t in self.anomaly_types_eval))))
        if not self.site_id:
            raise ConfigError("site_id must be non-empty")
        if self.n_records < 1:
            raise ConfigError(f"{self.site_id}: n_records must be positive")
        lo, hi = self.tower_perturbation
        if not lo <= hi:
            raise ConfigError(f"{self.site_id}: tower_perturbation must satisfy low <= high")
        if not 0.001 <= self.fraud_fraction < 0.01:
            raise ConfigError(f"{self.site_id}: fraud_fraction must lie in [0.001, 0.01)")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ConfigError(f"{self.site_id}: overlap_fraction must lie in [0, 1]")
        if not 0.0 < self.label_apply_prob <= 1.0:
            raise ConfigError(f"{self.site_id}: label_apply_prob must lie in (0, 1]")
        if not self.anomaly_types_train:
            raise ConfigError(f"{self.site_id}: anomaly_types_train must be non-empty")
        for t in (*self.anomaly_types_train, *self.anomaly_types_eval):
            if t not in ANOMALY_TYPES:
                raise ConfigError(f"{self.site_id}: unknown anomaly type {t}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    epochs_per_round: int = 1
    batch_size: int = 64
    focal_gamma: float = 2.0
    # (legit, fraud) weights; "auto" = inverse class frequency on the client's training split
    focal_alpha: Any = (0.25, 0.75)
    optimizer: str = "adam"
    # False keeps each trainer's optimizer moments across rounds
    reset_optimizer: bool = False
    prox_mu: float = 0.0
    layernorm_eps: float = 1e-5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs_per_round < 1:
            raise ConfigError("batch_size and epochs_per_round must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be >= 0")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if self.focal_alpha != "auto":
            a = tuple(float(x) for x in self.focal_alpha)
            if len(a) != 2 or min(a) < 0:
                raise ConfigError("focal_alpha must be 'auto' or a non-negative pair")
            object.__setattr__(self, "focal_alpha", a)
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))


DEFAULT_ORDERS = tuple(range(2, 65)) + (128, 256)


@dataclass(frozen=True)
class PrivacySpec:
    """DP target. ``sampling_rate``/``total_steps`` are resolved per client when left unset."""

    target_epsilon: float
    target_delta: float = 1e-5
    max_grad_norm: float = 1.0
    sampling_rate: float | None = None
    total_steps: int | None = None
    orders: tuple = DEFAULT_ORDERS

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(self.orders))
        if not self.target_epsilon > 0:
            raise ConfigError("target_epsilon must be positive")
        if not 0 < self.target_delta < 1:
            raise ConfigError("target_delta must lie in (0, 1)")
        if not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be positive")
        if self.sampling_rate is not None and not 0 < self.sampling_rate <= 1:
            raise ConfigError("sampling_rate must lie in (0, 1]")
        if self.total_steps is not None and self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if not self.orders or min(self.orders) <= 1:
            raise ConfigError("orders must be a non-empty list of values > 1")


@dataclass(frozen=True)
class FederationConfig:
    sites: tuple
    algorithm: str = "fedavg"
    rounds: int = 20
    server_lr: float = 1.0
    server_momentum: float = 0.6
    prox_mu: float = 0.01
    train: TrainConfig = field(default_factory=TrainConfig)
    dp: PrivacySpec | None = None
    seed: int = 0
    partition_ratios: tuple = (0.2, 0.6, 0.2)
    clock_now: int = DEFAULT_CLOCK_NOW
    count_transform: str = "log"

    def __post_init__(self):
        sites = tuple(s if isinstance(s, SiteConfig) else SiteConfig(**s) for s in self.sites)
        object.__setattr__(self, "sites", sites)
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig(**self.train))
        if isinstance(self.dp, dict):
            object.__setattr__(self, "dp", PrivacySpec(**self.dp))
        object.__setattr__(self, "partition_ratios", tuple(float(r) for r in self.partition_ratios))
        if not sites:
            raise ConfigError("at least one site is required")
        ids = [s.site_id for s in sites]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate site ids: {ids}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.algorithm == "fedopt" and not self.server_lr >= 0:
            raise ConfigError("fedopt needs server_lr >= 0")
        if not 0 <= self.server_momentum < 1:
            raise ConfigError("server_momentum must lie in [0, 1)")
        if self.algorithm == "fedprox" and self.prox_mu < 0:
            raise ConfigError("fedprox needs prox_mu >= 0")
        if self.count_transform not in ("log", "raw"):
            raise ConfigError("count_transform must be 'log' or 'raw'")

    @property
    def site_ids(self) -> tuple:
        return tuple(s.site_id for s in self.sites)

    def local_train_config(self) -> TrainConfig:
        """Training config as seen by a client (proximal weight only under FedProx)."""
        mu = self.prox_mu if self.algorithm == "fedprox" else self.train.prox_mu
        return dataclasses.replace(self.train, prox_mu=mu)

    def data_dict(self) -> dict:
        """The subset of the config that determines generated datasets."""
        d = to_dict(self)
        return {k: d[k] for k in ("sites", "partition_ratios", "clock_now")}


@dataclass(frozen=True)
class ExperimentConfig:
    federation: FederationConfig
    output_dir: str = "runs/default"
    data_dir: str | None = None
    mode: str = "inprocess"

    def __post_init__(self):
        if isinstance(self.federation, dict):
            object.__setattr__(self, "federation", FederationConfig(**self.federation))
        if self.mode not in ("inprocess", "tcp"):
            raise ConfigError("mode must be 'inprocess' or 'tcp'")

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.output_dir) / "data"


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def config_hash(obj) -> str:
    payload = obj if isinstance(obj, dict) else to_dict(obj)
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_experiment(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:  # unknown / missing keys
        raise ConfigError(str(exc)) from exc


def save_experiment(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2) + "\n")


def _lerp(a, b, t):
    return a + (b - a) * t


# Train-time anomaly exposure per site: no site sees every type, and every
# type is seen by at least one site. Evaluation sets carry all four.
DEFAULT_TRAIN_TYPES = {
    "site-A": (1,),
    "site-B": (1, 2),
    "site-C": (2, 3),
    "site-D": (3, 4),
    "site-E": (1, 4),
}


def default_sites(
    n_records: int = 200_000,
    fraud_fraction: float = 0.006,
    overlap_fraction: float = 0.1,
    label_apply_prob: float = 0.9,
    seed: int = 0,
    sd_ratio: float = 0.5,
    train_types: dict | None = None,
) -> tuple:
    """Five heterogeneous sites A-E anchored on the site-A and site-E parameters.

    Normal personal amounts go from 20k (A) to 150k (E), anomalous amounts are
    5x normal (750k at E), business accounts transact 2.5x personal, and tower
    jitter widens from [-0.75, 1.25] to [-10, 10] degrees.
    """
    train_types = train_types or DEFAULT_TRAIN_TYPES
    sites = []
    for i, sid in enumerate(sorted(train_types)):
        t = i / 4
        personal = _lerp(20_000.0, 150_000.0, t)
        means = {"BUSINESS": 2.5 * personal, "CHECKING": personal, "SAVINGS": personal}
        normal = {k: LogNormalSpec(m, sd_ratio * m) for k, m in means.items()}
        anomalous = {k: LogNormalSpec(5 * m, sd_ratio * 5 * m) for k, m in means.items()}
        sites.append(
            SiteConfig(
                site_id=sid,
                n_records=n_records,
                amount_normal=normal,
                amount_anomalous=anomalous,
                tower_perturbation=(_lerp(-0.75, -10.0, t), _lerp(1.25, 10.0, t)),
                type1_push_factor=_lerp(-2.0, -15.0, t),
                anomaly_types_train=train_types[sid],
                anomaly_types_eval=ANOMALY_TYPES,
                fraud_fraction=fraud_fraction,
                overlap_fraction=overlap_fraction,
                label_apply_prob=label_apply_prob,
                seed=derive_seed(seed, "site", sid),
            )
        )
    return tuple(sites)


def desk_scale_federation(algorithm: str = "fedavg", seed: int = 0, **overrides) -> FederationConfig:
    """5 sites x 20k records, 0.5% fraud, 20 rounds."""
    sites = default_sites(n_records=20_000, fraud_fraction=0.005, seed=seed)
    kw = dict(sites=sites, algorithm=algorithm, rounds=20, seed=seed)
    kw.update(overrides)
    return FederationConfig(**kw)
