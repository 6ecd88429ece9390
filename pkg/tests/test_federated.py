import copy
import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from fednews import secure_agg
from fednews.cli import dataset_for
from fednews.config import TrainConfig, config_from_dict
from fednews.federated import (Aggregate, ClientState, ClientUpdate, ConsistencyError, Federation, RunFailure,
                               centralized_step, centralized_train, client_batch, client_local_train,
                               run_training, sample_group)
from fednews.nn.optim import nadam_step
from fednews.nn import tensor as T
from fednews.nn.params import ParamStore

from conftest import assert_grads_close, central_differences, small_run_config


@pytest.fixture
def fed(tiny_dataset):
    return Federation(tiny_dataset, small_run_config())


def _client(uid, history, pos=(), neg=()):
    neg = np.array(neg, dtype=np.int64)
    return ClientState(uid, list(history), np.array(pos, dtype=np.int64),
                       neg.reshape(len(pos), -1) if len(pos) else np.zeros((0, 1), dtype=np.int64))


# -- group sampling -----------------------------------------------------------------

def test_sample_group_full_population():
    ids = [f"U{i}" for i in range(7)]
    assert sample_group(ids, 7, 0) == sorted(ids)


def test_sample_group_deterministic_and_distinct():
    ids = [f"U{i:02d}" for i in range(40)]
    a = sample_group(ids, 10, 5)
    assert a == sample_group(ids, 10, 5)
    assert len(set(a)) == 10 and set(a) <= set(ids)
    assert a != sample_group(ids, 10, 6)


def test_sample_group_bounds():
    with pytest.raises(ValueError):
        sample_group(["a", "b"], 1, 0)
    with pytest.raises(ValueError):
        sample_group(["a", "b"], 3, 0)
    assert TrainConfig().group_size == 200


# -- news pool -----------------------------------------------------------------------

def test_pool_is_union_of_two_clients(fed):
    fed.clients = {"A": _client("A", [0, 1]), "B": _client("B", [1, 2])}
    assert fed.compute_news_pool(["A", "B"], 0) == [0, 1, 2]


def test_pool_covers_shown_candidates(fed):
    fed.clients = {"A": _client("A", [0], pos=[3], neg=[[7, 9]]), "B": _client("B", [4])}
    assert fed.compute_news_pool(["A", "B"], 0) == [0, 3, 4, 7, 9]


def test_empty_histories_skip_round(fed):
    fed.clients = {"A": _client("A", []), "B": _client("B", [])}
    fed.client_ids = ["A", "B"]
    before = fed.server.user_params.copy()
    state = fed.run_round(0)
    assert state.skipped and state.pool == []
    for k in before:
        np.testing.assert_array_equal(fed.server.user_params[k], before[k])


def test_pool_matches_brute_force_union(tiny_dataset):
    fed = Federation(tiny_dataset, small_run_config(group_size=8))
    group = sample_group(fed.client_ids, min(8, len(fed.client_ids)), 3)
    union = sorted(set().union(*(fed.clients[u].local_news() for u in group)))
    assert fed.compute_news_pool(group, 2) == union


# -- payload -------------------------------------------------------------------------

def test_payload_filtering_and_size(fed):
    pool = list(range(0, 20, 2))
    p = fed.distribute_round_payload(pool)
    assert p.reprs.shape == (10, fed.d) and p.repr_bytes == 10 * fed.d * 8
    np.testing.assert_array_equal(p.reprs, fed.server.news_reprs[pool])
    assert p.repr_bytes < len(fed.news_ids) * fed.d * 8
    assert set(p.user_params) == set(fed.server.user_params)
    assert not any(k.startswith("news.") for k in p.user_params)


def test_payload_rejects_unknown_rows(fed):
    with pytest.raises(ConsistencyError):
        fed.distribute_round_payload([0, len(fed.news_ids)])


# -- local training -------------------------------------------------------------------

def _payload_for(fed, client):
    return fed.distribute_round_payload(sorted(client.local_news()))


def test_untouched_pooled_news_has_zero_gradient(fed):
    uid = fed.client_ids[0]
    c = fed.clients[uid]
    extra = sorted(set(range(len(fed.news_ids))) - c.local_news())[:3]
    payload = fed.distribute_round_payload(sorted(c.local_news() | set(extra)))
    upd = client_local_train(fed.model, c, payload, np.arange(c.n_samples), None)
    rows = [list(payload.pool).index(e) for e in extra]
    np.testing.assert_array_equal(upd.g_news[rows], np.zeros((3, fed.d)))
    assert np.abs(upd.g_news).sum() > 0


def test_client_news_gradient_finite_differences(fed):
    uid = fed.client_ids[0]
    c = fed.clients[uid]
    c = dataclasses.replace(c, positives=c.positives[:2], negatives=c.negatives[:2])
    payload = _payload_for(fed, c)
    upd = client_local_train(fed.model, c, payload, np.arange(2), None)
    local = {int(g): i for i, g in enumerate(payload.pool)}
    hist = [local[g] for g in c.history]
    cands = np.vectorize(local.__getitem__)(np.column_stack([c.positives, c.negatives]))
    reprs = payload.reprs.copy()

    def f():
        return fed.model.loss_from_reprs(reprs, [hist], [0, 0], cands, payload.user_params).item()

    numeric = central_differences(f, {"n": reprs})["n"]
    # the update is pre-multiplied by |B_u| = 2
    assert_grads_close({"n": upd.g_news / 2}, {"n": numeric})


def test_single_sample_matches_direct_gradient(fed):
    uid = fed.client_ids[1]
    c = fed.clients[uid]
    payload = _payload_for(fed, c)
    upd = client_local_train(fed.model, c, payload, np.array([0]), None)
    tracked = fed.server.user_params.track()
    all_reprs = fed.server.news_reprs
    cand = np.array([[c.positives[0], *c.negatives[0]]])
    loss = fed.model.loss_from_reprs(all_reprs, [c.history], [0], cand, tracked)
    direct = T.backward(loss, tracked)
    assert upd.weight == 1 and upd.loss == pytest.approx(loss.item(), abs=1e-12)
    for k in direct:
        np.testing.assert_allclose(upd.g_user[k], direct[k], rtol=1e-10, atol=1e-14)


def test_client_gradients_are_clipped_then_weighted(fed):
    uid = fed.client_ids[0]
    c = fed.clients[uid]
    payload = _payload_for(fed, c)
    idx = np.arange(c.n_samples)
    upd = client_local_train(fed.model, c, payload, idx, 1e-4)
    norm_user = np.sqrt(sum(np.sum(g * g) for g in upd.g_user.values()))
    assert norm_user == pytest.approx(1e-4 * idx.size, rel=1e-9)
    assert np.linalg.norm(upd.g_news) == pytest.approx(1e-4 * idx.size, rel=1e-9)


def test_client_with_no_samples_rejected(fed):
    c = fed.clients[fed.client_ids[0]]
    with pytest.raises(ValueError):
        client_local_train(fed.model, c, _payload_for(fed, c), np.arange(0), None)


def test_client_batch_respects_size():
    c = _client("U1", [0], pos=list(range(10)), neg=[[0]] * 10)
    np.testing.assert_array_equal(client_batch(c, 20, 0, 0), np.arange(10))
    b = client_batch(c, 4, 0, 3)
    assert len(b) == 4 and len(set(b.tolist())) == 4
    np.testing.assert_array_equal(b, client_batch(c, 4, 0, 3))


# -- aggregation -----------------------------------------------------------------------

def _update(fed, uid, value, weight, rows=1):
    g_user = {k: np.full_like(v, value * weight) for k, v in fed.server.user_params.items()}
    return ClientUpdate(uid, g_user, np.full((rows, fed.d), value * weight), weight, 0.5 * weight)


def test_weighted_mean_example(fed):
    agg = fed.aggregate_gradients([_update(fed, "a", 1.0, 1), _update(fed, "b", 2.0, 3)], 0)
    tol = 2 * 2.0 ** -25
    assert agg.total_weight == 4
    for g in agg.g_user.values():
        assert np.abs(g - 1.75).max() <= tol
    assert np.abs(agg.g_news - 1.75).max() <= tol
    assert agg.loss == pytest.approx(0.5, abs=tol)


def test_identical_gradients_aggregate_to_themselves(fed):
    agg = fed.aggregate_gradients([_update(fed, u, 0.375, w) for u, w in (("a", 2), ("b", 5), ("c", 1))], 0)
    for g in agg.g_user.values():
        np.testing.assert_array_equal(g, np.full_like(g, 0.375))


def test_aggregation_rejects_single_client(fed):
    with pytest.raises(ValueError):
        fed.aggregate_gradients([_update(fed, "a", 1.0, 1)], 0)


def test_aggregation_zero_weight_skips(fed):
    assert fed.aggregate_gradients([_update(fed, "a", 0.0, 0), _update(fed, "b", 0.0, 0)], 0) is None


# -- server updates -------------------------------------------------------------------------

def test_zero_user_aggregate_keeps_model(fed):
    before = fed.server.user_params.copy()
    fed.server_update_user_model({k: np.zeros_like(v) for k, v in before.items()})
    for k in before:
        np.testing.assert_array_equal(fed.server.user_params[k], before[k])


def test_user_update_deterministic(tiny_dataset):
    outs = []
    for _ in range(2):
        f = Federation(tiny_dataset, small_run_config())
        g = {k: np.full_like(v, 0.01) for k, v in f.server.user_params.items()}
        f.server_update_user_model(g)
        outs.append(f.server.user_params.copy())
    for k in outs[0]:
        np.testing.assert_array_equal(outs[0][k], outs[1][k])


def test_zero_news_aggregate_keeps_model_and_reprs(fed):
    before_p, before_r = fed.server.news_params.copy(), fed.server.news_reprs.copy()
    fed.server_update_news_model(np.zeros((3, fed.d)), [0, 1, 2], 0)
    for k in before_p:
        np.testing.assert_array_equal(fed.server.news_params[k], before_p[k])
    np.testing.assert_array_equal(fed.server.news_reprs, before_r)


def test_news_chain_rule_gradient_finite_differences(fed):
    pool = [0, 3, 5]
    g_news = np.random.default_rng(0).normal(size=(3, fed.d))
    analytic = fed.news_model_gradient(g_news, pool)
    params = fed.server.news_params
    contents = [fed.contents[i] for i in pool]
    probe = ParamStore({k: params[k] for k in ("news.fusion.q", "news.image.proj.0.W", "news.text.pool.W",
                                               "news.image.placeholder")})

    def f():
        return float(np.sum(fed.model.news.encode_batch(contents, params).data * g_news))

    assert_grads_close(analytic, central_differences(f, probe))


def test_news_update_refreshes_pooled_reprs(fed):
    pool = [1, 2, 6]
    g = np.random.default_rng(1).normal(size=(3, fed.d))
    stale = fed.server.news_reprs.copy()
    fed.server_update_news_model(g, pool, 0)
    fresh = fed.model.encode_catalog([fed.contents[i] for i in pool], fed.server.news_params)
    np.testing.assert_array_equal(fed.server.news_reprs[pool], fresh)
    others = [i for i in range(len(fed.news_ids)) if i not in pool]
    np.testing.assert_array_equal(fed.server.news_reprs[others], stale[others])


def test_catalog_refresh_cadence(tiny_dataset):
    fed = Federation(tiny_dataset, small_run_config(catalog_refresh=2))
    g = np.random.default_rng(1).normal(size=(1, fed.d))
    fed.server_update_news_model(g, [0], 1)  # (t + 1) % 2 == 0 -> whole catalog
    np.testing.assert_array_equal(fed.server.news_reprs,
                                  fed.model.encode_catalog(fed.contents, fed.server.news_params))


# -- whole runs ----------------------------------------------------------------------------

def _rows(logs):
    return [{k: v for k, v in log.row().items() if k != "wall_ms"} for log in logs]


def test_zero_rounds_evaluates_initial_model(tiny_dataset):
    logs = run_training(tiny_dataset, small_run_config(max_rounds=0))
    assert len(logs) == 1 and logs[0].state.t == 0 and logs[0].metrics is not None


def test_runs_are_bit_identical(tiny_dataset):
    a = run_training(tiny_dataset, small_run_config(max_rounds=3))
    b = run_training(tiny_dataset, small_run_config(max_rounds=3))
    assert _rows(a) == _rows(b)
    assert [log.state.t for log in a] == [0, 1, 2, 3]


def test_threads_do_not_change_results(tiny_dataset):
    a = run_training(tiny_dataset, small_run_config(max_rounds=2))
    cfg = small_run_config(max_rounds=2)
    cfg.threads = 3
    assert _rows(a) == _rows(run_training(tiny_dataset, cfg))


def test_dropout_retries_with_new_group(tiny_dataset, monkeypatch):
    fed = Federation(tiny_dataset, small_run_config())
    monkeypatch.setattr(fed, "_dropped", lambda group, t, attempt: {0} if attempt == 0 else set())
    state = fed.run_round(0)
    assert state.attempts == 2 and not state.skipped and state.total_weight > 0


def test_dropout_beyond_budget_fails(tiny_dataset):
    fed = Federation(tiny_dataset, small_run_config(retry_budget=2))
    fed.dropout_prob = 1.0
    with pytest.raises(RunFailure):
        fed.run_round(0)


def test_server_sees_only_ring_noise(tiny_dataset, monkeypatch):
    """Every vector reaching the server is a uint64 share sum that differs from each plaintext secret."""
    fed = Federation(tiny_dataset, small_run_config())
    seen, plain = [], []
    real_reconstruct, real_make = secure_agg.reconstruct_sum, secure_agg.make_shares

    def spy_reconstruct(share_sums, frac_bits, channel=None, expected=None):
        seen.extend(s.values.copy() for s in share_sums)
        return real_reconstruct(share_sums, frac_bits, channel, expected)

    def spy_make(encoded, *args, **kw):
        plain.append(np.asarray(encoded).copy())
        return real_make(encoded, *args, **kw)

    monkeypatch.setattr(secure_agg, "reconstruct_sum", spy_reconstruct)
    monkeypatch.setattr(secure_agg, "make_shares", spy_make)
    ch = secure_agg.Channel(round_id=0, record=True)
    monkeypatch.setattr(fed, "_channel", lambda t, group, dropped: ch)
    fed.run_round(0)
    assert seen and plain
    assert all(v.dtype == np.uint64 for v in seen)
    for v in seen:
        for p in plain:
            if p.size == v.size:
                assert not np.array_equal(v, p)
    assert {f.name for f in dataclasses.fields(secure_agg.Message)} == {"round_id", "sender", "receiver", "width"}
    assert {f.name for f in dataclasses.fields(secure_agg.ShareSum)} == {"holder", "values"}
    assert all(isinstance(m.receiver, int) or m.receiver == "server" for m in ch.trace)


def test_checkpoint_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    full = Federation(tiny_dataset, small_run_config(max_rounds=4))
    full_rows = _rows(full.run())
    first = Federation(tiny_dataset, small_run_config(max_rounds=2))
    first_rows = _rows(first.run())
    first.save(tmp_path / "ck.bin")
    resumed = Federation(tiny_dataset, small_run_config(max_rounds=4))
    resumed.restore(tmp_path / "ck.bin")
    rest = _rows(resumed.run())
    assert first_rows[:2] == full_rows[:2]
    assert rest[-1] == full_rows[-1]
    for k in full.server.user_params:
        np.testing.assert_array_equal(resumed.server.user_params[k], full.server.user_params[k])
    for k in full.server.news_params:
        np.testing.assert_array_equal(resumed.server.news_params[k], full.server.news_params[k])


def test_aggregate_dataclass_shape(fed):
    agg = fed.aggregate_gradients([_update(fed, "a", 1.0, 2, rows=4), _update(fed, "b", 1.0, 2, rows=4)], 1)
    assert isinstance(agg, Aggregate) and agg.g_news.shape == (4, fed.d)


# -- federated vs centralized ------------------------------------------------------------

def centralized_gradients(fed, batches):
    """Plain end-to-end gradient of the mean loss over the union of the batches."""
    group = sorted(batches)
    clients = [fed.clients[u] for u in group]
    blocks = [np.column_stack([c.positives[batches[u]], c.negatives[batches[u]]]) for u, c in zip(group, clients)]
    needed = sorted(set().union(*(c.history for c in clients)) | {int(x) for b in blocks for x in b.ravel()})
    local = {g: i for i, g in enumerate(needed)}
    hists = [[local[g] for g in c.history] for c in clients]
    rows = [r for r, b in enumerate(blocks) for _ in range(len(b))]
    cands = np.vectorize(local.__getitem__)(np.concatenate(blocks))
    tn, tu = fed.server.news_params.track(), fed.server.user_params.track()
    reprs = fed.model.news.encode_batch([fed.contents[i] for i in needed], tn)
    loss = fed.model.loss_from_reprs(reprs, hists, rows, cands, tu)
    return T.backward(loss, {**tn, **tu}), needed


def test_full_round_gradients_match_centralized(tiny_dataset):
    cfg = small_run_config(group_size=len(tiny_dataset.users), clip_delta=None)
    fed = Federation(tiny_dataset, cfg)
    group = sorted(fed.client_ids)
    batches = {u: client_batch(fed.clients[u], cfg.train.batch_size, cfg.seed, 0) for u in group}
    central, needed = centralized_gradients(fed, batches)
    pool = fed.compute_news_pool(group, 0)
    assert pool == needed
    agg = fed.aggregate_gradients(fed.local_updates(group, fed.distribute_round_payload(pool), 0), 0)
    bound = len(group) * 2.0 ** -25
    for k, g in agg.g_user.items():
        assert np.abs(g - central[k]).max() <= bound, k
    for k, g in fed.news_model_gradient(agg.g_news, pool).items():
        assert np.abs(g - central[k]).max() <= bound, k


def test_full_round_update_tracks_centralized_step(tiny_dataset):
    cfg = small_run_config(group_size=len(tiny_dataset.users), clip_delta=None)
    fed, central = Federation(tiny_dataset, cfg), Federation(tiny_dataset, cfg)
    state = fed.run_round(0)
    batches = {u: client_batch(central.clients[u], cfg.train.batch_size, cfg.seed, 0) for u in central.client_ids}
    loss = centralized_step(central, batches)
    assert sorted(state.group) == sorted(central.client_ids)
    assert state.loss == pytest.approx(loss, abs=len(state.group) * 2.0 ** -25)
    # the first NAdam step moves each coordinate by at most about lr, whatever the gradient scale
    for a, b in ((fed.server.news_params, central.server.news_params), (fed.server.user_params, central.server.user_params)):
        for k in a:
            assert np.abs(a[k] - b[k]).max() <= 2 * cfg.train.lr, k


def test_integer_scaled_gradients_aggregate_bitwise(fed):
    """Gradients on the 2^-24 grid survive fixed-point aggregation without any rounding."""
    rng = np.random.default_rng(3)
    weights = [3, 1, 4]
    updates, g_sum, w_total = [], None, sum(weights)
    for i, w in enumerate(weights):
        g_user = {k: rng.integers(-2**20, 2**20, size=v.shape) * 2.0 ** -24 for k, v in fed.server.user_params.items()}
        g_news = rng.integers(-2**20, 2**20, size=(5, fed.d)) * 2.0 ** -24
        updates.append(ClientUpdate(f"u{i}", g_user, g_news, w, 0.25 * w))
        g_sum = (g_user, g_news) if g_sum is None else ({k: g_sum[0][k] + g_user[k] for k in g_user}, g_sum[1] + g_news)
    agg = fed.aggregate_gradients(updates, 0)
    for k in g_sum[0]:
        np.testing.assert_array_equal(agg.g_user[k], g_sum[0][k] / w_total)
    np.testing.assert_array_equal(agg.g_news, g_sum[1] / w_total)
    plain = fed.server.user_params.copy()
    plain_opt = copy.deepcopy(fed.server.user_opt)
    fed.server_update_user_model(agg.g_user)
    nadam_step(plain, {k: v / w_total for k, v in g_sum[0].items()}, plain_opt)
    for k in plain:
        np.testing.assert_array_equal(fed.server.user_params[k], plain[k])


def test_centralized_baseline_not_worse_than_federated_on_benchmark():
    raw = json.loads((Path(__file__).resolve().parents[1] / "configs" / "benchmark.json").read_text())
    fed_cfg = config_from_dict(raw)
    central_cfg = config_from_dict({**raw, "mode": "centralized"})
    ds = dataset_for(fed_cfg)
    fed_auc = run_training(ds, fed_cfg)[-1].metrics.auc
    central_auc = centralized_train(ds, central_cfg)[-1].metrics.auc
    assert central_auc >= fed_auc - 0.02
