"""Scatter-gather federated training (FedAvg / FedProx / FedOpt) and the Local and Central baselines.

Every regime shares the same model initialization, feature pipeline, local
training loop and evaluation, so differences in the results come from the
training paradigm alone. Seeds are derived from ``(master seed, round, site)``
which makes in-process and multi-process runs produce the same numbers.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import dp as dpmod
from . import nn
from .config import FederationConfig, PrivacySpec, TrainConfig, derive_seed
from .datagen import DatasetPartitions, parse_types
from .evaluation import MetricReport, evaluate_logits, headline_f1
from .features import ScalerParams, apply_scaler, engineer_batch, fit_scaler

log = logging.getLogger(__name__)


class FederationError(RuntimeError):
    pass


@dataclass
class ClientUpdate:
    site_id: str
    params: nn.ModelParameters
    n_samples: int
    local_metrics: dict = field(default_factory=dict)
    privacy: dict | None = None
    # stays with the client; never serialized
    optimizer_state: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError(f"{self.site_id}: update with no samples")


@dataclass
class RoundRecord:
    round_index: int
    global_params_hash: str
    site_metrics: dict
    aggregate: dict
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "global_params_hash": self.global_params_hash,
            "sites": self.site_metrics,
            "aggregate": self.aggregate,
            "duration_s": self.duration_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(d["round"], d["global_params_hash"], d["sites"], d["aggregate"], d.get("duration_s", 0.0))


# -- data ---------------------------------------------------------------------------

@dataclass
class SiteData:
    """Standardized train/test arrays for one trainer (a site, or the pooled central trainer)."""

    site_id: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    test_types: list
    scaler: ScalerParams

    @property
    def n_train(self) -> int:
        return int(self.y_train.shape[0])


def _labels(df: pd.DataFrame) -> np.ndarray:
    return df["FRAUD_FLAG"].to_numpy(dtype=np.int64)


def _tags(df: pd.DataFrame) -> list:
    return [parse_types(t) for t in df["ANOMALY_TYPES"].astype(str)]


def fit_site_scaler(parts: Sequence[DatasetPartitions], count_transform: str = "log") -> ScalerParams:
    scaling = pd.concat([p.scaling for p in parts], ignore_index=True)
    return fit_scaler(engineer_batch(scaling, count_transform, "scaling"))


def prepare_site(site_id: str, parts: DatasetPartitions, count_transform: str = "log",
                 scaler: ScalerParams | None = None) -> SiteData:
    """Engineer features and standardize with the site's own scaling partition (or a given scaler)."""
    if scaler is None:
        scaler = fit_site_scaler([parts], count_transform)
    x_tr = apply_scaler(engineer_batch(parts.train, count_transform, "train"), scaler).values
    x_te = apply_scaler(engineer_batch(parts.test, count_transform, "test"), scaler).values
    return SiteData(site_id, x_tr, _labels(parts.train), x_te, _labels(parts.test), _tags(parts.test), scaler)


def pool_sites(sites: Mapping[str, DatasetPartitions], count_transform: str = "log") -> tuple[SiteData, dict]:
    """Central trainer data (pooled train, pooled scaler) plus per-site test views under that scaler."""
    ids = sorted(sites)
    scaler = fit_site_scaler([sites[s] for s in ids], count_transform)
    per_site = {s: prepare_site(s, sites[s], count_transform, scaler) for s in ids}
    pooled = SiteData(
        "+".join(ids),
        np.concatenate([per_site[s].x_train for s in ids]),
        np.concatenate([per_site[s].y_train for s in ids]),
        np.zeros((0, per_site[ids[0]].x_train.shape[1])),
        np.zeros(0, dtype=np.int64),
        [],
        scaler,
    )
    return pooled, per_site


# -- local training -----------------------------------------------------------------

def _focal_alpha(train: TrainConfig, labels: np.ndarray):
    return nn.inverse_frequency_alpha(labels) if train.focal_alpha == "auto" else train.focal_alpha


def _prox(grads: nn.ModelParameters, params: nn.ModelParameters, anchor: nn.ModelParameters | None,
          mu: float) -> nn.ModelParameters:
    if anchor is None or mu == 0:
        return grads
    return nn.ModelParameters({k: g + mu * (params[k] - anchor[k]) for k, g in grads.items()}, copy=False)


def prox_gradient(params: Mapping, anchor: Mapping, mu: float) -> dict:
    """The proximal term's gradient ``mu (w - w_global)``."""
    return {k: mu * (np.asarray(params[k]) - np.asarray(anchor[k])) for k in params}


def local_train(global_params: nn.ModelParameters, data: SiteData, train: TrainConfig, seed: int,
                ledger: dpmod.PrivacyLedger | None = None, optimizer_state: dict | None = None) -> ClientUpdate:
    """``epochs_per_round`` passes over the site's train split starting from ``global_params``.

    Without DP, batches are consecutive slices of a fresh permutation per
    epoch. With a ledger, each step draws a Poisson sample with the ledger's
    rate and applies per-sample clipping plus Gaussian noise. Passing the
    previous round's ``optimizer_state`` continues the client's Adam moments.
    """
    n = data.n_train
    if n == 0:
        raise FederationError(f"{data.site_id}: empty train partition")
    rng = np.random.default_rng(seed)
    alpha = _focal_alpha(train, data.y_train)
    params = global_params.copy()
    anchor = global_params if train.prox_mu > 0 else None
    state = optimizer_state
    losses = []
    steps_per_epoch = math.ceil(n / train.batch_size)
    for _ in range(train.epochs_per_round):
        if ledger is None:
            perm = rng.permutation(n)
            for b in range(steps_per_epoch):
                idx = perm[b * train.batch_size:(b + 1) * train.batch_size]
                logits, cache = nn.forward(params, data.x_train[idx], train.layernorm_eps)
                loss, dlogits = nn.focal_loss(logits, data.y_train[idx], train.focal_gamma, alpha)
                grads, _ = nn.backward(cache, dlogits)
                params, state = nn.optimizer_step(params, _prox(grads, params, anchor, train.prox_mu), state, train)
                losses.append(loss)
        else:
            expected = ledger.sampling_rate * n
            for _ in range(steps_per_epoch):
                idx = np.flatnonzero(rng.random(n) < ledger.sampling_rate)
                if idx.size:
                    logits, cache = nn.forward(params, data.x_train[idx], train.layernorm_eps)
                    loss, dlogits = nn.focal_loss_terms(logits, data.y_train[idx], train.focal_gamma, alpha)
                    per_sample, _ = nn.backward(cache, dlogits, per_sample=True)
                    clipped = dpmod.clip_per_sample(per_sample, ledger.max_grad_norm)
                    losses.append(float(loss.mean()))
                else:
                    clipped = {k: np.zeros((0,) + v.shape) for k, v in params.items()}
                noisy = dpmod.privatize_batch(clipped, ledger.max_grad_norm, ledger.sigma, expected, rng)
                grads = nn.ModelParameters(noisy, copy=False)
                params, state = nn.optimizer_step(params, _prox(grads, params, anchor, train.prox_mu), state, train)
                ledger.step()
    if not params.is_finite():
        raise FederationError(f"{data.site_id}: non-finite parameters after local training")
    metrics = {"train_loss": float(np.mean(losses)) if losses else 0.0, "steps": steps_per_epoch * train.epochs_per_round}
    return ClientUpdate(data.site_id, params, n, metrics, ledger.snapshot() if ledger is not None else None, state)


def make_ledger(spec: PrivacySpec | None, n_train: int, train: TrainConfig, rounds: int) -> dpmod.PrivacyLedger | None:
    """Ledger whose noise multiplier spends the whole budget over ``rounds`` rounds."""
    if spec is None:
        return None
    steps = math.ceil(n_train / train.batch_size)
    resolved = dpmod.resolve_spec(spec, n_train, train.batch_size, steps, train.epochs_per_round, max(rounds, 1))
    return dpmod.PrivacyLedger.for_spec(resolved)


# -- aggregation ----------------------------------------------------------------------

def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> nn.ModelParameters:
    """Sample-count weighted mean of client parameters (order-insensitive)."""
    if not updates:
        raise FederationError("no client updates to aggregate")
    ups = sorted(updates, key=lambda u: u.site_id)
    for u in ups[1:]:
        nn.check_same_shapes(ups[0].params, u.params)
    total = float(sum(u.n_samples for u in ups))
    out = {}
    for k in ups[0].params:
        acc = np.zeros_like(ups[0].params[k])
        for u in ups:
            acc += (u.n_samples / total) * u.params[k]
        out[k] = acc
    return nn.ModelParameters(out, copy=False)


def server_opt_step(global_params: nn.ModelParameters, aggregated: nn.ModelParameters, server_lr: float,
                    state: dict | None = None, momentum: float = 0.0) -> tuple[nn.ModelParameters, dict]:
    """Server SGD (with optional momentum) on the pseudo-gradient ``global - aggregated``.

    Written as ``aggregated + (delta - lr * v)`` so that lr = 1 without
    momentum returns the aggregate bit for bit.
    """
    nn.check_same_shapes(global_params, aggregated)
    state = {} if state is None else state
    out, new_state = {}, {}
    for k, g in global_params.items():
        delta = g - aggregated[k]
        v = momentum * state[k] + delta if k in state else delta
        new_state[k] = v
        out[k] = aggregated[k] + (delta - server_lr * v)
    return nn.ModelParameters(out, copy=False), new_state


# -- workers and transports -------------------------------------------------------------

class SiteWorker:
    """Everything one client does: local training and evaluation of a broadcast model."""

    def __init__(self, data: SiteData, config: FederationConfig):
        self.data = data
        self.config = config
        self.train_config = config.local_train_config()
        self.ledger = make_ledger(config.dp, data.n_train, self.train_config, config.rounds)
        self._round = 0
        self._opt_state = None

    @property
    def site_id(self) -> str:
        return self.data.site_id

    def train(self, round_index: int, params: nn.ModelParameters) -> ClientUpdate:
        if round_index <= self._round:
            raise FederationError(f"{self.site_id}: round {round_index} is not after {self._round}")
        self._round = round_index
        seed = derive_seed(self.config.seed, "train", round_index, self.site_id)
        upd = local_train(params, self.data, self.train_config, seed, self.ledger,
                          None if self.train_config.reset_optimizer else self._opt_state)
        self._opt_state = upd.optimizer_state
        return upd

    def evaluate(self, params: nn.ModelParameters) -> dict:
        report = evaluate_site(params, self.data, self.train_config.layernorm_eps)
        out = report.to_dict()
        if self.ledger is not None:
            out["epsilon"] = self.ledger.epsilon()
        return out


def evaluate_site(params: nn.ModelParameters, data: SiteData, eps: float = nn.LN_EPS) -> MetricReport:
    logits = nn.predict_logits(params, data.x_test, eps)
    return evaluate_logits(logits, data.y_test, data.test_types)


class InProcessTransport:
    """Runs every worker sequentially in this process."""

    def __init__(self, workers: Sequence[SiteWorker]):
        self.workers = {w.site_id: w for w in workers}

    @property
    def site_ids(self) -> list:
        return sorted(self.workers)

    def train_round(self, round_index: int, params: nn.ModelParameters) -> list:
        return [self.workers[s].train(round_index, params) for s in self.site_ids]

    def evaluate(self, round_index: int, params: nn.ModelParameters) -> dict:
        return {s: self.workers[s].evaluate(params) for s in self.site_ids}

    def close(self) -> None:
        pass


def aggregate_metrics(site_metrics: Mapping) -> dict:
    if not site_metrics:
        return {}
    keys = ("f1", "precision", "recall", "accuracy", "auprc")
    agg = {k: float(np.mean([m[k] for m in site_metrics.values()])) for k in keys}
    agg["mean_type_f1"] = headline_f1(site_metrics)
    eps = [m["epsilon"] for m in site_metrics.values() if "epsilon" in m]
    if eps:
        agg["max_epsilon"] = float(max(eps))
    return agg


def initial_model(config: FederationConfig, input_dim: int) -> nn.ModelParameters:
    return nn.init_model(input_dim, derive_seed(config.seed, "init"))


def run_federation(config: FederationConfig, transport, input_dim: int, on_round=None) -> tuple[list, nn.ModelParameters]:
    """Scatter-gather rounds: broadcast, local training, gather, aggregate, evaluate."""
    if config.algorithm not in ("fedavg", "fedprox", "fedopt"):
        raise FederationError(f"{config.algorithm} is not a federated algorithm")
    params = initial_model(config, input_dim)
    server_state: dict = {}
    history = []
    for r in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        updates = transport.train_round(r, params)
        if sorted(u.site_id for u in updates) != sorted(config.site_ids):
            raise FederationError(f"round {r}: updates from {[u.site_id for u in updates]}")
        aggregated = aggregate_fedavg(updates)
        if config.algorithm == "fedopt":
            params, server_state = server_opt_step(params, aggregated, config.server_lr, server_state,
                                                   config.server_momentum)
        else:
            params = aggregated
        metrics = transport.evaluate(r, params)
        for u in updates:
            metrics[u.site_id]["train_loss"] = u.local_metrics.get("train_loss")
        rec = RoundRecord(r, params.digest(), metrics, aggregate_metrics(metrics), time.perf_counter() - t0)
        log.info("round %d mean_type_f1=%.4f", r, rec.aggregate["mean_type_f1"])
        history.append(rec)
        if on_round is not None:
            on_round(rec)
    return history, params


def _solo_run(config: FederationConfig, trainer: SiteData, eval_sets: Mapping[str, SiteData]):
    train_cfg = config.local_train_config()
    params = initial_model(config, trainer.x_train.shape[1])
    ledger = make_ledger(config.dp, trainer.n_train, train_cfg, config.rounds)
    history = []
    opt_state = None
    for r in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        upd = local_train(params, trainer, train_cfg, derive_seed(config.seed, "train", r, trainer.site_id), ledger,
                          None if train_cfg.reset_optimizer else opt_state)
        params, opt_state = upd.params, upd.optimizer_state
        metrics = {}
        for s in sorted(eval_sets):
            metrics[s] = evaluate_site(params, eval_sets[s], train_cfg.layernorm_eps).to_dict()
            metrics[s]["train_loss"] = upd.local_metrics["train_loss"]
            if ledger is not None:
                metrics[s]["epsilon"] = ledger.epsilon()
        history.append(RoundRecord(r, params.digest(), metrics, aggregate_metrics(metrics), time.perf_counter() - t0))
    return history, params


def run_central(config: FederationConfig, sites: Mapping[str, DatasetPartitions]):
    """Pooled-data baseline: one trainer on all train splits, scored on every site's test split."""
    pooled, per_site = pool_sites(sites, config.count_transform)
    return _solo_run(config, pooled, per_site)


def run_local(config: FederationConfig, sites: Mapping[str, DatasetPartitions]) -> dict:
    """Each site trains alone for the same number of rounds; scored on its own test split."""
    out = {}
    for s in sorted(sites):
        data = prepare_site(s, sites[s], config.count_transform)
        out[s] = _solo_run(config, data, {s: data})
    return out


def local_summary(histories: Mapping) -> list:
    """Merge per-site local histories into one aggregate per round."""
    if not histories:
        return []
    n = min(len(h) for h, _ in histories.values())
    merged = []
    for i in range(n):
        metrics = {s: histories[s][0][i].site_metrics[s] for s in sorted(histories)}
        merged.append(RoundRecord(i + 1, "", metrics, aggregate_metrics(metrics)))
    return merged


def run(config: FederationConfig, sites: Mapping[str, DatasetPartitions], transport=None):
    """Dispatch on ``config.algorithm``. Returns (history, final params or per-site params)."""
    if config.algorithm == "central":
        return run_central(config, sites)
    if config.algorithm == "local":
        per_site = run_local(config, sites)
        return local_summary(per_site), {s: p for s, (_, p) in per_site.items()}
    if transport is None:
        workers = [SiteWorker(prepare_site(s, sites[s], config.count_transform), config) for s in sorted(sites)]
        transport = InProcessTransport(workers)
        input_dim = workers[0].data.x_train.shape[1]
    else:
        from .features import feature_layout
        input_dim = len(feature_layout(config.count_transform))
    return run_federation(config, transport, input_dim)


# -- history IO --------------------------------------------------------------------------

def write_history(path, history: Sequence[RoundRecord], meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        for rec in history:
            d = rec.to_dict()
            if meta:
                d.update(meta)
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_history(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(RoundRecord.from_dict(json.loads(line)))
    return out


def history_digest(history: Sequence[RoundRecord]) -> str:
    """Hash of everything in a history except wall-clock durations."""
    h = hashlib.sha256()
    for rec in history:
        d = rec.to_dict()
        d.pop("duration_s")
        h.update(json.dumps(d, sort_keys=True).encode())
    return h.hexdigest()


def headline_curve(history: Sequence[RoundRecord]) -> list:
    return [rec.aggregate["mean_type_f1"] for rec in history]


def with_algorithm(config: FederationConfig, algorithm: str, **changes) -> FederationConfig:
    return dataclasses.replace(config, algorithm=algorithm, **changes)
