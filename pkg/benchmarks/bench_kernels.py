"""Compiled vs numpy kernels: micro timings plus one end-to-end training round.

Each backend runs in its own interpreter (FEDFRAUD_KERNELS=python forces the
fallback), so module-level backend selection is exercised exactly as in use.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit


def _best(fn, number, repeat):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def worker(repeat: int) -> dict:
    import numpy as np

    import fedfraud
    from fedfraud import fedcore, kernels
    from fedfraud.config import TrainConfig, default_sites, FederationConfig
    from fedfraud.datagen import generate_federation

    rng = np.random.default_rng(0)
    out = {"backend": fedfraud.KERNEL_BACKEND}
    for rows, width in ((64, 64), (64, 16), (4096, 64)):
        z = rng.standard_normal((rows, width))
        gain, offset = rng.standard_normal(width), rng.standard_normal(width)
        fwd = kernels.layernorm_relu_forward(z, gain, offset, 1e-5)
        dout = rng.standard_normal((rows, width))
        number = max(1, 20000 // rows)
        out[f"ln_forward {rows}x{width}"] = _best(lambda: kernels.layernorm_relu_forward(z, gain, offset, 1e-5),
                                                  number, repeat)
        out[f"ln_backward {rows}x{width}"] = _best(lambda: kernels.layernorm_relu_backward(dout, *fwd, gain),
                                                   number, repeat)
    sites = default_sites(n_records=20_000, fraud_fraction=0.005, seed=0)[:1]
    cfg = FederationConfig(sites=sites, algorithm="fedavg", rounds=1, seed=0, train=TrainConfig())
    data = fedcore.prepare_site("site-A", generate_federation(cfg)["site-A"])
    p0 = fedcore.initial_model(cfg, data.x_train.shape[1])
    out["local epoch 12k rows"] = _best(lambda: fedcore.local_train(p0, data, cfg.train, seed=0), 1, repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return
    results = {}
    for mode in ("auto", "python"):
        env = dict(os.environ, FEDFRAUD_KERNELS=mode)
        proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        res = json.loads(proc.stdout)
        results[res.pop("backend")] = res
    if "cython" not in results:
        print("compiled kernels are not built; only the numpy fallback was timed")
    names = list(results["python"])
    print(f"{'case':<24}{'cython':>14}{'python':>14}{'speedup':>10}")
    for n in names:
        py = results["python"][n]
        cy = results.get("cython", {}).get(n)
        cy_txt = f"{cy * 1e6:11.1f} us" if cy is not None else f"{'-':>14}"
        ratio = f"{py / cy:9.2f}x" if cy else f"{'-':>10}"
        print(f"{n:<24}{cy_txt}{py * 1e6:11.1f} us{ratio}")


if __name__ == "__main__":
    main()
