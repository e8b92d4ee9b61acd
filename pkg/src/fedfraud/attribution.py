"""Feature attribution: GradientShap plus a brute-force exact Shapley oracle.

A model here is any callable ``f(x) -> (values, input_grads)`` taking a batch
``(n, d)`` and returning the scalar output per row and its gradient w.r.t.
the row. :func:`mlp_margin` adapts the network to the fraud-minus-legit logit
margin.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn

MAX_EXACT_FEATURES = 12


def mlp_margin(params: nn.ModelParameters, eps: float = nn.LN_EPS):
    """``f(x) = logit_fraud - logit_legit`` and its input gradient."""

    def f(x):
        logits, cache = nn.forward(params, x, eps)
        d = np.zeros_like(logits)
        d[:, 0] = -1.0
        d[:, 1] = 1.0
        _, dx = nn.backward(cache, d)
        return logits[:, 1] - logits[:, 0], dx

    return f


def linear_model(w, b: float = 0.0):
    w = np.asarray(w, dtype=np.float64)

    def f(x):
        x = np.asarray(x, dtype=np.float64)
        return x @ w + b, np.broadcast_to(w, x.shape).copy()

    return f


@dataclass
class AttributionReport:
    attributions: np.ndarray  # (samples, features)
    feature_names: tuple
    n_baselines: int
    expected_value: float  # mean model output over the baselines
    method: str = "gradient_shap"

    def __post_init__(self):
        if self.attributions.ndim != 2 or self.attributions.shape[1] != len(self.feature_names):
            raise ValueError("attribution matrix does not match the feature names")
        if not np.isfinite(self.attributions).all():
            raise ValueError("non-finite attributions")

    @property
    def mean_abs(self) -> np.ndarray:
        if self.attributions.shape[0] == 0:
            return np.zeros(len(self.feature_names))
        return np.abs(self.attributions).mean(axis=0)

    def ranking(self) -> list:
        return rank_features(self)


def rank_features(report: AttributionReport) -> list:
    """(feature, mean |phi|) pairs, largest first; ties broken by feature name."""
    scores = report.mean_abs
    return sorted(zip(report.feature_names, scores.tolist()), key=lambda p: (-p[1], p[0]))


def gradient_shap(model, inputs, baselines, n_samples: int = 50, rng: np.random.Generator | None = None,
                  feature_names=None) -> AttributionReport:
    """Expected-gradients estimate ``mean_k (x - b_k) * grad f(b_k + t_k (x - b_k))``.

    Each draw pairs every input with a uniformly chosen baseline row and a
    uniform ``t`` in [0, 1). The running mean keeps constant-gradient models exact.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    base = np.atleast_2d(np.asarray(baselines, dtype=np.float64))
    if base.shape[0] == 0:
        raise ValueError("baseline set is empty")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if base.shape[1] != x.shape[1]:
        raise ValueError("inputs and baselines differ in feature count")
    rng = rng if rng is not None else np.random.default_rng(0)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(x.shape[1]))
    n = x.shape[0]
    phi = np.zeros_like(x)
    if n:
        for k in range(1, n_samples + 1):
            b = base[rng.integers(0, base.shape[0], size=n)]
            t = rng.random((n, 1))
            _, g = model(b + t * (x - b))
            phi += ((x - b) * g - phi) / k
    expected = float(np.mean(model(base)[0]))
    return AttributionReport(phi, names, base.shape[0], expected, "gradient_shap")


def _shapley_weights(d: int) -> np.ndarray:
    # weight for a coalition of size s not containing i: s! (d - s - 1)! / d!
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])


def exact_shapley(model, x, baseline, max_features: int = MAX_EXACT_FEATURES) -> np.ndarray:
    """Exact Shapley values with features outside a coalition set to ``baseline``.

    Enumerates all ``2^d`` coalitions, so ``d`` is capped at ``max_features``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    baseline = np.asarray(baseline, dtype=np.float64).reshape(-1)
    d = x.size
    if baseline.size != d:
        raise ValueError("x and baseline differ in length")
    if d > max_features:
        raise ValueError(
            f"{d} features needs 2^{d} model evaluations; exact Shapley is capped at {max_features}. "
            "Use gradient_shap, or attribute a feature subset."
        )
    masks = np.array(list(itertools.product((0, 1), repeat=d)), dtype=bool)  # row index = binary code
    values = np.asarray(model(np.where(masks, x, baseline))[0], dtype=np.float64)
    sizes = masks.sum(axis=1)
    w = _shapley_weights(d)
    phi = np.zeros(d)
    for i in range(d):
        bit = 1 << (d - 1 - i)
        without = np.flatnonzero(~masks[:, i])
        phi[i] = np.sum(w[sizes[without]] * (values[without + bit] - values[without]))
    return phi


def write_report(report: AttributionReport, out_dir, prefix: str = "attribution", meta: dict | None = None) -> dict:
    """Ranked importance table (text + CSV) and the raw matrix CSV for external plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ranking = rank_features(report)
    paths = {
        "ranking_csv": out / f"{prefix}_ranking.csv",
        "ranking_txt": out / f"{prefix}_ranking.txt",
        "matrix_csv": out / f"{prefix}_matrix.csv",
    }
    with open(paths["ranking_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "feature", "mean_abs_attribution"])
        for i, (name, score) in enumerate(ranking, 1):
            w.writerow([i, name, repr(score)])
    lines = []
    for k, v in (meta or {}).items():
        lines.append(f"# {k}: {v}")
    lines.append(f"# method: {report.method}, score: mean |attribution|")
    lines.append(f"# samples: {report.attributions.shape[0]}, baselines: {report.n_baselines}, "
                 f"expected value: {report.expected_value:.6g}")
    width = max(len(n) for n in report.feature_names)
    for i, (name, score) in enumerate(ranking, 1):
        lines.append(f"{i:>3}  {name:<{width}}  {score:.6g}")
    paths["ranking_txt"].write_text("\n".join(lines) + "\n")
    with open(paths["matrix_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(report.feature_names)
        for row in report.attributions:
            w.writerow([repr(float(v)) for v in row])
    return {k: str(v) for k, v in paths.items()}
