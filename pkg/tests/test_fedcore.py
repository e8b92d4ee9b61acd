import dataclasses

import numpy as np
import pytest

from fedfraud import fedcore, nn
from fedfraud.config import PrivacySpec, TrainConfig
from fedfraud.fedcore import ClientUpdate, FederationError, SiteData, aggregate_fedavg, server_opt_step

from .conftest import replace_train, small_federation


def scalar(v):
    return nn.ModelParameters({"w": np.array([float(v)]), "b": np.array([[float(v), -float(v)]])})


def update(site, v, n):
    return ClientUpdate(site, scalar(v), n)


# -- aggregation ----------------------------------------------------------------------

def test_fedavg_single_client_identity():
    assert aggregate_fedavg([update("a", 1.7, 5)]).equals(scalar(1.7))


def test_fedavg_unweighted_and_weighted_means():
    assert aggregate_fedavg([update("a", 0, 10), update("b", 4, 10)])["w"][0] == 2.0
    assert aggregate_fedavg([update("a", 0, 1), update("b", 4, 3)])["w"][0] == 3.0


def test_fedavg_permutation_invariant_and_bounded(rng):
    ups = [ClientUpdate(f"s{i}", nn.ModelParameters({"w": rng.standard_normal((3, 4))}), int(rng.integers(1, 100)))
           for i in range(5)]
    a = aggregate_fedavg(ups)
    b = aggregate_fedavg([ups[i] for i in rng.permutation(5)])
    assert a.equals(b)
    stack = np.stack([u.params["w"] for u in ups])
    assert (a["w"] >= stack.min(axis=0) - 1e-15).all() and (a["w"] <= stack.max(axis=0) + 1e-15).all()


def test_fedavg_errors():
    with pytest.raises(FederationError):
        aggregate_fedavg([])
    bad = ClientUpdate("b", nn.ModelParameters({"w": np.zeros(2), "b": np.zeros((1, 2))}), 1)
    with pytest.raises(ValueError):
        aggregate_fedavg([update("a", 1, 1), bad])
    with pytest.raises(ValueError):
        update("a", 1, 0)


def test_server_opt_examples():
    g, agg = scalar(2.0), scalar(0.0)
    assert server_opt_step(g, agg, 1.0)[0].equals(agg)
    assert server_opt_step(g, agg, 0.0)[0].equals(g)
    assert server_opt_step(g, agg, 0.5)[0]["w"][0] == 1.0


def test_server_opt_lr_one_is_bitwise_aggregate(rng):
    g = nn.ModelParameters({"w": rng.standard_normal(100)})
    agg = nn.ModelParameters({"w": rng.standard_normal(100)})
    assert server_opt_step(g, agg, 1.0, None, 0.0)[0].equals(agg)


def test_server_momentum_accumulates():
    p1, state = server_opt_step(scalar(1.0), scalar(0.0), 1.0, None, 0.5)
    assert p1["w"][0] == 0.0
    p2, _ = server_opt_step(scalar(1.0), scalar(0.0), 1.0, state, 0.5)
    # v = 0.5 * 1 + 1 = 1.5 -> 1 - 1.5
    assert p2["w"][0] == pytest.approx(-0.5)


def test_prox_gradient_examples():
    g = fedcore.prox_gradient({"w": np.array([1.0, -1.0])}, {"w": np.zeros(2)}, 0.1)
    assert np.allclose(g["w"], [0.1, -0.1])
    same = fedcore.prox_gradient({"w": np.ones(3)}, {"w": np.ones(3)}, 5.0)
    assert not same["w"].any()


# -- local training -------------------------------------------------------------------

def synthetic_site(rng, site_id, n=64, d=5):
    x = rng.standard_normal((n, d))
    y = (x[:, 0] + 0.3 * rng.standard_normal(n) > 1.0).astype(np.int64)
    return SiteData(site_id, x, y, x, y, [(1,) if v else () for v in y], None)


def test_fedavg_one_step_equals_central_full_batch(rng):
    train = TrainConfig(learning_rate=0.05, optimizer="sgd", batch_size=10_000)
    a, b = synthetic_site(rng, "a"), synthetic_site(rng, "b")
    p0 = nn.init_model(5, 3)
    ups = [fedcore.local_train(p0, s, train, seed=1) for s in (a, b)]
    pooled = SiteData("ab", np.vstack([a.x_train, b.x_train]), np.concatenate([a.y_train, b.y_train]),
                      a.x_test, a.y_test, a.test_types, None)
    central = fedcore.local_train(p0, pooled, train, seed=1).params
    agg = aggregate_fedavg(ups)
    for k in p0:
        assert np.abs(agg[k] - central[k]).max() <= 1e-10


def test_prox_zero_matches_plain_training(rng):
    s = synthetic_site(rng, "a", n=200)
    p0 = nn.init_model(5, 0)
    plain = fedcore.local_train(p0, s, TrainConfig(batch_size=32), seed=4).params
    prox0 = fedcore.local_train(p0, s, TrainConfig(batch_size=32, prox_mu=0.0), seed=4).params
    assert plain.equals(prox0)
    prox = fedcore.local_train(p0, s, TrainConfig(batch_size=32, prox_mu=1.0), seed=4).params
    assert not plain.equals(prox)
    # the proximal pull keeps the update closer to the anchor
    assert np.linalg.norm(prox.flat() - p0.flat()) < np.linalg.norm(plain.flat() - p0.flat())


def test_local_train_empty_partition(rng):
    s = synthetic_site(rng, "a")
    empty = dataclasses.replace(s, x_train=s.x_train[:0], y_train=s.y_train[:0])
    with pytest.raises(FederationError):
        fedcore.local_train(nn.init_model(5, 0), empty, TrainConfig(), seed=0)


def test_local_train_dp_steps_and_budget(rng):
    s = synthetic_site(rng, "a", n=300)
    train = TrainConfig(batch_size=30)
    ledger = fedcore.make_ledger(PrivacySpec(5.0), s.n_train, train, rounds=4)
    p = nn.init_model(5, 0)
    eps = []
    for r in range(4):
        upd = fedcore.local_train(p, s, train, seed=r, ledger=ledger)
        p = upd.params
        eps.append(upd.privacy["epsilon"])
    assert ledger.steps_taken == 4 * 10
    assert all(a < b for a, b in zip(eps, eps[1:]))
    assert eps[-1] <= 5.0
    assert p.is_finite()


def test_local_train_dp_survives_empty_poisson_batches(rng):
    s = synthetic_site(rng, "a", n=20)
    train = TrainConfig(batch_size=1)
    ledger = fedcore.make_ledger(PrivacySpec(50.0, sampling_rate=0.01), s.n_train, train, rounds=1)
    upd = fedcore.local_train(nn.init_model(5, 0), s, train, seed=0, ledger=ledger)
    assert upd.params.is_finite() and ledger.steps_taken == 20


# -- full runs ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fedavg_run(small_sites):
    return fedcore.run(small_federation("fedavg"), small_sites)


def test_run_structure(fedavg_run, small_config):
    history, params = fedavg_run
    assert [r.round_index for r in history] == [1, 2, 3]
    for rec in history:
        assert sorted(rec.site_metrics) == list(small_config.site_ids)
        assert set(rec.aggregate) >= {"mean_type_f1", "f1", "auprc"}
        assert rec.global_params_hash
    assert history[-1].global_params_hash == params.digest()


def test_run_deterministic(fedavg_run, small_sites):
    again, params = fedcore.run(small_federation("fedavg"), small_sites)
    assert fedcore.history_digest(again) == fedcore.history_digest(fedavg_run[0])
    assert params.equals(fedavg_run[1])


def test_zero_rounds_returns_initial_model(small_sites):
    cfg = small_federation("fedavg", rounds=0)
    history, params = fedcore.run(cfg, small_sites)
    assert history == []
    assert params.equals(fedcore.initial_model(cfg, params.input_dim))


def test_fedprox_mu_zero_matches_fedavg(fedavg_run, small_sites):
    history, params = fedcore.run(small_federation("fedprox", prox_mu=0.0), small_sites)
    assert fedcore.history_digest(history) == fedcore.history_digest(fedavg_run[0])
    assert params.equals(fedavg_run[1])


def test_fedopt_sgd_lr_one_matches_fedavg(fedavg_run, small_sites):
    history, params = fedcore.run(small_federation("fedopt", server_lr=1.0, server_momentum=0.0), small_sites)
    assert fedcore.history_digest(history) == fedcore.history_digest(fedavg_run[0])
    assert params.equals(fedavg_run[1])


def test_fedprox_and_fedopt_differ_when_active(fedavg_run, small_sites):
    for cfg in (small_federation("fedprox", prox_mu=0.5), small_federation("fedopt", server_momentum=0.6)):
        _, params = fedcore.run(cfg, small_sites)
        assert not params.equals(fedavg_run[1])


def test_central_pools_train_partitions(small_sites):
    pooled, per_site = fedcore.pool_sites(small_sites)
    assert pooled.n_train == sum(len(p.train) for p in small_sites.values())
    assert set(per_site) == set(small_sites)
    for s in per_site.values():
        assert s.scaler is pooled.scaler


def test_central_with_one_site_equals_local(small_sites):
    one = {"site-A": small_sites["site-A"]}
    cfg = small_federation("central", n_sites=1, rounds=2)
    central, cp = fedcore.run(cfg, one)
    local, lp = fedcore.run(dataclasses.replace(cfg, algorithm="local"), one)
    assert cp.equals(lp["site-A"])
    assert central[-1].site_metrics == local[-1].site_metrics


def test_local_returns_per_site_params(small_sites):
    history, per_site = fedcore.run(small_federation("local", rounds=2), small_sites)
    assert sorted(per_site) == sorted(small_sites)
    assert len(history) == 2 and sorted(history[0].site_metrics) == sorted(small_sites)


def test_optimizer_reset_changes_trajectory(small_sites):
    a, _ = fedcore.run(small_federation("fedavg"), small_sites)
    b, _ = fedcore.run(replace_train(small_federation("fedavg"), reset_optimizer=True), small_sites)
    assert a[0].global_params_hash == b[0].global_params_hash
    assert a[-1].global_params_hash != b[-1].global_params_hash


def test_dp_federation_reports_epsilon(small_sites):
    cfg = small_federation("fedavg", rounds=2, dp=PrivacySpec(10.0))
    history, _ = fedcore.run(cfg, small_sites)
    eps = [r.aggregate["max_epsilon"] for r in history]
    assert eps[0] < eps[1] <= 10.0
    assert all("epsilon" in m for m in history[-1].site_metrics.values())


def test_worker_rejects_stale_round(small_sites, small_config):
    w = fedcore.SiteWorker(fedcore.prepare_site("site-A", small_sites["site-A"]), small_config)
    p = fedcore.initial_model(small_config, w.data.x_train.shape[1])
    w.train(1, p)
    with pytest.raises(FederationError):
        w.train(1, p)


def test_history_roundtrip(tmp_path, fedavg_run):
    history, _ = fedavg_run
    path = tmp_path / "h.jsonl"
    fedcore.write_history(path, history)
    back = fedcore.read_history(path)
    assert fedcore.history_digest(back) == fedcore.history_digest(history)
    assert fedcore.headline_curve(back) == fedcore.headline_curve(history)
