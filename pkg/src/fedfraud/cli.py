"""Command-line driver: generate, train, evaluate, attribute, account, serve, client.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 protocol error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import attribution, dp, fedcore, nn, transport
from .config import ConfigError, ExperimentConfig, config_hash, derive_seed, load_experiment, to_dict
from .datagen import load_site, parse_types, read_manifest, write_dataset
from .evaluation import binary_metrics, confusion, convergence_round, evaluate_logits
from .features import LayoutError, ScalerParams, apply_scaler, engineer_batch, feature_layout

log = logging.getLogger("fedfraud")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PROTOCOL = 0, 1, 2, 3
SUMMARY_FIELDS = ("mean_type_f1", "f1", "precision", "recall", "accuracy", "auprc")


class ValidationError(Exception):
    pass


# -- config handling ------------------------------------------------------------------

def resolve_config(args) -> ExperimentConfig:
    cfg = load_experiment(args.config)
    fed = cfg.federation
    if getattr(args, "seed", None) is not None:
        sites = tuple(dataclasses.replace(s, seed=derive_seed(args.seed, "site", s.site_id)) for s in fed.sites)
        fed = dataclasses.replace(fed, seed=args.seed, sites=sites)
    changes = {"federation": fed}
    if getattr(args, "out", None):
        changes["output_dir"] = str(args.out)
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    return dataclasses.replace(cfg, **changes)


def run_hash(cfg: ExperimentConfig) -> str:
    """Identity of a training run: the federation config (data, model and protocol)."""
    return config_hash(cfg.federation)


def _load_sites(cfg: ExperimentConfig) -> dict:
    data_dir = cfg.dataset_dir
    if not (data_dir / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {data_dir}; run `fedfraud generate` first")
    manifest = read_manifest(data_dir)
    want = config_hash(cfg.federation.data_dict())
    if manifest.get("config_hash") != want:
        raise ValidationError(f"dataset at {data_dir} was generated from a different config "
                              f"({manifest.get('config_hash')} != {want})")
    return {s: load_site(data_dir, s) for s in cfg.federation.site_ids}


# -- output helpers --------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(rows: list, columns: list) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _write_csv(path: Path, rows: list, columns: list, chash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "")) for c in columns})


def _summary_row(label: str, metrics: dict) -> dict:
    row = {"regime": label}
    for k in SUMMARY_FIELDS:
        row[k] = metrics.get(k)
    if "epsilon" in metrics or "max_epsilon" in metrics:
        row["epsilon"] = metrics.get("epsilon", metrics.get("max_epsilon"))
    for t, v in metrics.get("per_type_f1", {}).items():
        row[f"type{t}_f1"] = v
    return row


def _emit_summary(out: Path, rows: list, chash: str, title: str) -> str:
    cols = ["regime", *SUMMARY_FIELDS]
    extra = sorted({k for r in rows for k in r if k.startswith("type")})
    if any("epsilon" in r for r in rows):
        cols.append("epsilon")
    cols += extra
    _write_csv(out / "summary.csv", rows, cols, chash)
    text = f"{title}\nconfig_hash {chash}\n\n{_table(rows, cols)}\n"
    (out / "summary.txt").write_text(text)
    return text


def _convergence_csv(out: Path, history: list, chash: str) -> None:
    rows = []
    for rec in history:
        row = {"round": rec.round_index, **{k: rec.aggregate.get(k) for k in (*SUMMARY_FIELDS, "max_epsilon")}}
        rows.append(row)
    _write_csv(out / "convergence.csv", rows, ["round", *SUMMARY_FIELDS, "max_epsilon"], chash)


# -- subcommands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    data_dir = cfg.dataset_dir
    manifest = write_dataset(cfg.federation, data_dir)
    sites = {s: load_site(data_dir, s) for s in cfg.federation.site_ids}
    for sid, parts in sites.items():
        fedcore.fit_site_scaler([parts], cfg.federation.count_transform).save(data_dir / f"{sid}_scaler.json")
    rows = []
    for sid, e in manifest["sites"].items():
        rows.append({"site": sid, "rows": sum(e["rows"].values()), "fraud": sum(e["fraud"].values()),
                     "fraud_rate": e["fraud_rate"], "mean_amount": e["mean_amount_usd"]})
    print(f"dataset written to {data_dir} (config_hash {manifest['config_hash']})")
    print(_table(rows, ["site", "rows", "fraud", "fraud_rate", "mean_amount"]))
    return EXIT_OK


def _spawn_clients(cfg: ExperimentConfig, address) -> list:
    host, port = address
    procs = []
    for sid in cfg.federation.site_ids:
        cmd = [sys.executable, "-m", "fedfraud", "client", "--connect", f"{host}:{port}",
               "--site", sid, "--data-dir", str(cfg.dataset_dir)]
        procs.append(subprocess.Popen(cmd))
    return procs


def _train_federated(cfg: ExperimentConfig, sites: dict):
    fed = cfg.federation
    if cfg.mode == "inprocess":
        return fedcore.run(fed, sites)
    procs = []
    try:
        history, params = transport.serve(fed, on_listen=lambda addr: procs.extend(_spawn_clients(cfg, addr)))
    finally:
        for p in procs:
            try:
                p.wait(timeout=60)
            except subprocess.TimeoutExpired:
                p.kill()
    bad = [p.returncode for p in procs if p.returncode != 0]
    if bad:
        raise transport.ProtocolError(f"client processes exited with {bad}")
    return history, params


def _scalers_for(cfg: ExperimentConfig, sites: dict) -> dict:
    fed = cfg.federation
    if fed.algorithm == "central":
        pooled = fedcore.fit_site_scaler([sites[s] for s in sorted(sites)], fed.count_transform)
        return {s: pooled for s in sites}
    return {s: fedcore.fit_site_scaler([sites[s]], fed.count_transform) for s in sites}


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    fed = cfg.federation
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = run_hash(cfg)
    sites = _load_sites(cfg)
    (out / "config.json").write_text(json.dumps({"config_hash": chash, **to_dict(cfg)}, indent=2) + "\n")
    t0 = time.perf_counter()
    scalers = _scalers_for(cfg, sites)
    meta_base = {"config_hash": chash, "algorithm": fed.algorithm, "rounds": fed.rounds,
                 "count_transform": fed.count_transform}
    if fed.algorithm == "local":
        per_site = fedcore.run_local(fed, sites)
        history = fedcore.local_summary(per_site)
        rows = []
        for s, (hist, params) in per_site.items():
            fedcore.write_history(out / f"history_{s}.jsonl", hist, {"config_hash": chash, "trainer": s})
            nn.save_checkpoint(out / f"checkpoint_{s}.ffck", params,
                               {**meta_base, "trainer": s, "scalers": {s: scalers[s].to_dict()}})
            rows.append(_summary_row(s, hist[-1].site_metrics[s]) if hist else {"regime": s})
        if history:
            rows.append(_summary_row("local (mean)", history[-1].aggregate))
    else:
        history, params = (fedcore.run_central(fed, sites) if fed.algorithm == "central"
                           else _train_federated(cfg, sites))
        nn.save_checkpoint(out / "checkpoint.ffck", params,
                           {**meta_base, "scalers": {s: sc.to_dict() for s, sc in scalers.items()}})
        rows = [_summary_row(f"{fed.algorithm} @ {s}", m) for s, m in history[-1].site_metrics.items()] if history else []
        if history:
            rows.append(_summary_row(fed.algorithm, history[-1].aggregate))
    fedcore.write_history(out / "history.jsonl", history, {"config_hash": chash})
    _convergence_csv(out, history, chash)
    conv = convergence_round(fedcore.headline_curve(history), 0.005, 3) if history else None
    text = _emit_summary(out, rows, chash, f"{fed.algorithm}: mean F1 after {fed.rounds} rounds")
    print(text)
    print(f"convergence round (window 3, sd <= 0.005): {conv}")
    print(f"finished in {time.perf_counter() - t0:.1f}s; outputs in {out}")
    return EXIT_OK


def _checkpoint_for(cfg: ExperimentConfig, path, sites: dict) -> tuple:
    """Load a checkpoint, refusing it unless it was trained under this config and these scalers."""
    params, meta = nn.load_checkpoint(path)
    want = run_hash(cfg)
    if meta.get("config_hash") != want:
        raise ValidationError(f"checkpoint {path} belongs to config {meta.get('config_hash')}, not {want}; "
                              "refusing to pair it with this config's scaler")
    scalers = _scalers_for(cfg, sites)
    for s, d in meta.get("scalers", {}).items():
        stored = ScalerParams.from_dict(d)
        if s not in scalers or not (np.array_equal(stored.mean, scalers[s].mean)
                                    and np.array_equal(stored.sd, scalers[s].sd)):
            raise ValidationError(f"scaler stored for {s} does not match the one refit from the dataset")
    return params, meta, scalers


def _site_matrix(parts, partition: str, scaler: ScalerParams, count_transform: str) -> np.ndarray:
    df = getattr(parts, partition)
    return apply_scaler(engineer_batch(df, count_transform, partition), scaler).values


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    fed = cfg.federation
    sites = _load_sites(cfg)
    params, meta, scalers = _checkpoint_for(cfg, args.checkpoint, sites)
    out = Path(args.out or Path(args.checkpoint).parent) / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    chash = meta["config_hash"]
    targets = [meta["trainer"]] if "trainer" in meta else sorted(sites)
    rows, cm_rows = [], []
    with open(out / "metrics.jsonl", "w") as fh:
        for s in targets:
            df = sites[s].test
            x = _site_matrix(sites[s], "test", scalers[s], fed.count_transform)
            y = df["FRAUD_FLAG"].to_numpy(dtype=np.int64)
            tags = [parse_types(t) for t in df["ANOMALY_TYPES"].astype(str)]
            logits = nn.predict_logits(params, x, fed.train.layernorm_eps)
            rep = evaluate_logits(logits, y, tags)
            fh.write(json.dumps({"config_hash": chash, "round": meta.get("rounds"), "site": s, "split": "test",
                                 **rep.to_dict()}, sort_keys=True) + "\n")
            rows.append(_summary_row(s, rep.to_dict()))
            cm_rows.append({"site": s, "subset": "all", **rep.confusion.as_dict()})
            pred = logits.argmax(axis=1)
            for k in sorted(rep.per_type_f1):
                mask = (y == 0) | np.array([yi == 1 and k in t for yi, t in zip(y, tags)])
                cm = confusion(pred[mask], y[mask])
                cm_rows.append({"site": s, "subset": f"type{k}", **cm.as_dict(), "f1": binary_metrics(cm).f1})
            pr_rows = [{"recall": r, "precision": p, "threshold": t}
                       for r, p, t in zip(rep.pr.recall.tolist(), rep.pr.precision.tolist(), rep.pr.thresholds.tolist())]
            _write_csv(out / f"pr_curve_{s}.csv", pr_rows, ["recall", "precision", "threshold"], chash)
    _write_csv(out / "confusion.csv", cm_rows, ["site", "subset", "tp", "fp", "fn", "tn", "f1"], chash)
    rows.append({"regime": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in SUMMARY_FIELDS}})
    print(_emit_summary(out, rows, chash, f"evaluation of {args.checkpoint}"))
    return EXIT_OK


def cmd_attribute(args) -> int:
    cfg = resolve_config(args)
    fed = cfg.federation
    sites = _load_sites(cfg)
    params, meta, scalers = _checkpoint_for(cfg, args.checkpoint, sites)
    out = Path(args.out or Path(args.checkpoint).parent) / "attribution"
    rng = np.random.default_rng(derive_seed(fed.seed, "attribute"))
    targets = [meta["trainer"]] if "trainer" in meta else sorted(sites)
    base_pool, xs, ys, tags = [], [], [], []
    for s in targets:
        base_pool.append(_site_matrix(sites[s], "train", scalers[s], fed.count_transform))
        df = sites[s].test
        xs.append(_site_matrix(sites[s], "test", scalers[s], fed.count_transform))
        ys.append(df["FRAUD_FLAG"].to_numpy(dtype=np.int64))
        tags += [parse_types(t) for t in df["ANOMALY_TYPES"].astype(str)]
    pool = np.concatenate(base_pool)
    baselines = pool[rng.choice(pool.shape[0], size=min(args.n_baselines, pool.shape[0]), replace=False)]
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    names = feature_layout(fed.count_transform)
    model = attribution.mlp_margin(params, fed.train.layernorm_eps)
    subsets = {"fraud": np.flatnonzero(y == 1)}
    for k in sorted({k for t in tags for k in t}):
        subsets[f"type{k}"] = np.flatnonzero((y == 1) & np.array([k in t for t in tags]))
    meta_out = {"config_hash": meta["config_hash"], "checkpoint": str(args.checkpoint)}
    for name, idx in subsets.items():
        if idx.size == 0:
            continue
        rep = attribution.gradient_shap(model, x[idx], baselines, args.k, rng, names)
        attribution.write_report(rep, out, name, meta_out)
        top = ", ".join(f"{n} ({s:.3g})" for n, s in attribution.rank_features(rep)[:3])
        print(f"{name:<6} n={idx.size:<4} top: {top}")
    print(f"reports in {out}")
    return EXIT_OK


def cmd_account(args) -> int:
    orders = dp.DEFAULT_ORDERS
    if args.target_epsilon is not None:
        spec = dp.PrivacySpec(target_epsilon=args.target_epsilon, target_delta=args.delta,
                              sampling_rate=args.q, total_steps=args.steps)
        sigma = dp.calibrate_noise(spec)
        print(f"sigma={sigma!r}")
    else:
        if args.sigma is None:
            raise ValidationError("give --sigma or --target-epsilon")
        sigma = args.sigma
    rdp = dp.compute_rdp(args.q, sigma, args.steps, orders)
    eps, order = dp.rdp_to_epsilon(rdp, orders, args.delta)
    print(f"epsilon={eps!r} order={order:g} q={args.q} sigma={sigma} steps={args.steps} delta={args.delta}")
    return EXIT_OK


def _parse_addr(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValidationError(f"address must be host:port, got {text!r}")
    return host, int(port)


def cmd_serve(args) -> int:
    cfg = resolve_config(args)
    fed = cfg.federation
    if fed.algorithm not in ("fedavg", "fedprox", "fedopt"):
        raise ValidationError(f"serve runs federated algorithms only, not {fed.algorithm}")
    host, port = _parse_addr(args.listen)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = run_hash(cfg)
    history, params = transport.serve(fed, host, port, accept_timeout=args.accept_timeout,
                                      on_listen=lambda a: print(f"listening on {a[0]}:{a[1]}", flush=True))
    fedcore.write_history(out / "history.jsonl", history, {"config_hash": chash})
    nn.save_checkpoint(out / "checkpoint.ffck", params,
                       {"config_hash": chash, "algorithm": fed.algorithm, "rounds": fed.rounds,
                        "count_transform": fed.count_transform})
    _convergence_csv(out, history, chash)
    rows = [_summary_row(f"{fed.algorithm} @ {s}", m) for s, m in history[-1].site_metrics.items()] if history else []
    if history:
        rows.append(_summary_row(fed.algorithm, history[-1].aggregate))
    print(_emit_summary(out, rows, chash, f"{fed.algorithm} over tcp: mean F1 after {fed.rounds} rounds"))
    return EXIT_OK


def cmd_client(args) -> int:
    host, port = _parse_addr(args.connect)
    summary = transport.run_client(host, port, args.site, args.data_dir, retries=args.retries)
    log.info("site %s done: %s", args.site, summary)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedfraud", description="Federated fraud detection experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="master seed (overrides federation and site seeds)")

    sp = sub.add_parser("generate", help="write per-site CSVs and a manifest")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="run the configured regime")
    common(sp)
    sp.add_argument("--mode", choices=("inprocess", "tcp"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on every test split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("attribute", help="GradientShap reports for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-baselines", type=int, default=500)
    sp.add_argument("--k", type=int, default=50, help="interpolation samples per input")
    sp.set_defaults(func=cmd_attribute)

    sp = sub.add_parser("account", help="privacy accounting for (q, sigma, steps, delta)")
    sp.add_argument("--q", type=float, required=True)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--target-epsilon", type=float, help="calibrate sigma instead of taking it")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.set_defaults(func=cmd_account)

    sp = sub.add_parser("serve", help="run the federation server over TCP")
    common(sp)
    sp.add_argument("--listen", default="127.0.0.1:7443")
    sp.add_argument("--accept-timeout", type=float, default=300.0)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("client", help="run one site's client")
    sp.add_argument("--connect", required=True, help="server host:port")
    sp.add_argument("--site", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--retries", type=int, default=20)
    sp.set_defaults(func=cmd_client)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except transport.ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ValidationError, ConfigError, LayoutError, dp.InfeasiblePrivacyTarget, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, fedcore.FederationError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
