"""Federated training rounds with a split news/user model and secure aggregation.

Round ``t``:

1. sample a client group U_m;
2. the group computes its news pool N_m with a secure sum of membership vectors;
3. the server sends every member the user model and the pooled news vectors;
4. each member trains locally and returns clipped, |B_u|-weighted gradients for the
   user model and the pooled news vectors, plus its weight and weighted loss;
5. those contributions are combined with a second secure sum;
6. the server steps the user model with NAdam, back-propagates the news-vector
   gradient through the news encoder, steps the news model and re-encodes the pool.

Evaluation runs centrally in the simulator; it is not part of the protocol.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import secure_agg
from .config import RunConfig
from .data import Dataset
from .model import NewsRecModel
from .nn import tensor as T
from .nn.optim import OptimizerState, clip_gradient_norm, nadam_step
from .nn.params import ParamStore, flatten, load_checkpoint, save_checkpoint, unflatten
from .ranking import MetricsReport, build_training_samples, evaluate_ranking, summarize

log = logging.getLogger(__name__)


class RunFailure(RuntimeError):
    """Rounds kept aborting beyond the retry budget."""


class ConsistencyError(RuntimeError):
    pass


# -- state ------------------------------------------------------------------

@dataclass
class ClientState:
    user_id: str
    history: list[int]
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.positives.size)

    def local_news(self) -> set[int]:
        """Every catalog row this client's data touches: history plus shown candidates."""
        return set(self.history) | set(self.positives.tolist()) | set(self.negatives.ravel().tolist())


@dataclass
class ServerState:
    news_params: ParamStore
    user_params: ParamStore
    news_reprs: np.ndarray
    news_opt: OptimizerState
    user_opt: OptimizerState
    round: int = 0


@dataclass
class Payload:
    user_params: ParamStore
    pool: np.ndarray
    reprs: np.ndarray

    @property
    def repr_bytes(self) -> int:
        return int(self.reprs.size) * 8

    @property
    def model_bytes(self) -> int:
        return self.user_params.num_values() * 8


@dataclass
class ClientUpdate:
    user_id: str
    g_user: dict[str, np.ndarray]
    g_news: np.ndarray
    weight: int
    loss: float


@dataclass
class Aggregate:
    g_user: dict[str, np.ndarray]
    g_news: np.ndarray
    total_weight: float
    loss: float


@dataclass
class RoundState:
    t: int
    group: list[str] = field(default_factory=list)
    pool: list[int] = field(default_factory=list)
    payload_bytes: int = 0
    repr_payload_bytes: int = 0
    full_catalog_bytes: int = 0
    share_bytes: int = 0
    loss: float = float("nan")
    total_weight: float = 0.0
    attempts: int = 1
    wall_ms: float = 0.0
    skipped: bool = False


@dataclass
class RoundLog:
    state: RoundState
    metrics: MetricsReport | None

    def row(self) -> dict:
        s, m = self.state, self.metrics
        return {
            "round": s.t, "group_size": len(s.group), "pool_size": len(s.pool),
            "payload_bytes": s.payload_bytes, "share_bytes": s.share_bytes,
            "loss": "" if np.isnan(s.loss) else f"{s.loss:.10g}",
            "auc": "" if m is None else f"{m.auc:.10g}",
            "mrr": "" if m is None else f"{m.mrr:.10g}",
            "ndcg5": "" if m is None else f"{m.ndcg5:.10g}",
            "ndcg10": "" if m is None else f"{m.ndcg10:.10g}",
            "wall_ms": f"{s.wall_ms:.1f}",
        }


# -- helpers ------------------------------------------------------------------

def sample_group(client_ids: Sequence[str], group_size: int, rng_seed) -> list[str]:
    """Uniform sample without replacement, returned in ascending id order."""
    if group_size < 2:
        raise ValueError("group size must be >= 2")
    if group_size > len(client_ids):
        raise ValueError(f"group size {group_size} exceeds population {len(client_ids)}")
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(client_ids), size=group_size, replace=False)
    return sorted(client_ids[i] for i in picks)


def build_clients(ds: Dataset, index: dict[str, int], K: int, seed: int) -> dict[str, ClientState]:
    samples = build_training_samples(ds.train, K, np.random.SeedSequence([seed, 0x5A]))
    by_user: dict[str, list] = {}
    for s in samples:
        by_user.setdefault(s.user_id, []).append(s)
    clients = {}
    for uid in sorted(by_user):
        hist = ds.users.get(uid)
        if hist is None or not hist.clicked:
            continue  # cold-start users do not train
        ss = by_user[uid]
        clients[uid] = ClientState(
            uid, [index[n] for n in hist.clicked],
            np.array([index[s.positive] for s in ss], dtype=np.int64),
            np.array([[index[n] for n in s.negatives] for s in ss], dtype=np.int64),
        )
    return clients


def client_batch(client: ClientState, batch_size: int, seed: int, t: int) -> np.ndarray:
    """Indices of the samples this client trains on in round ``t``."""
    n = client.n_samples
    if n <= batch_size:
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, t, 0xB7, *client.user_id.encode()]))
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def client_local_train(model: NewsRecModel, client: ClientState, payload: Payload,
                       sample_idx: np.ndarray, clip_delta: float | None) -> ClientUpdate:
    """Local loss over the client's batch; gradients w.r.t. W_u and every pooled vector.

    Returned gradients are clipped (user and news parts separately) and then
    multiplied by the batch size.
    """
    if sample_idx.size == 0:
        raise ValueError(f"client {client.user_id} has no training samples")
    local = {int(g): i for i, g in enumerate(payload.pool)}
    try:
        hist = [local[g] for g in client.history]
        cands = np.array([[local[int(g)] for g in row] for row in
                          np.column_stack([client.positives[sample_idx], client.negatives[sample_idx]])],
                         dtype=np.int64)
    except KeyError as exc:
        raise ConsistencyError(f"client {client.user_id}: news row {exc} missing from pool") from None
    reprs = T.Tensor(payload.reprs, requires_grad=True)
    uparams = payload.user_params.track()
    loss = model.loss_from_reprs(reprs, [hist], np.zeros(len(cands), dtype=np.int64), cands, uparams)
    grads = T.grad(loss, [reprs, *uparams.values()])
    g_news, g_user = grads[0], dict(zip(uparams, grads[1:]))
    if clip_delta is not None:
        g_user = clip_gradient_norm(g_user, clip_delta)
        g_news = clip_gradient_norm({"news": g_news}, clip_delta)["news"]
    w = int(sample_idx.size)
    return ClientUpdate(client.user_id, {k: v * w for k, v in g_user.items()}, g_news * w, w,
                        loss.item() * w)


# -- the federation -----------------------------------------------------------

class Federation:
    """Server state, client population and round orchestration for one run."""

    def __init__(self, ds: Dataset, cfg: RunConfig):
        cfg.model.vocab_size = max(cfg.model.vocab_size, len(ds.vocab))
        self.cfg = cfg
        self.ds = ds
        self.model = NewsRecModel(cfg.model)
        self.news_ids = ds.news_ids
        self.index = {nid: i for i, nid in enumerate(self.news_ids)}
        self.contents = [ds.catalog[n] for n in self.news_ids]
        self.clients = build_clients(ds, self.index, cfg.train.negatives, cfg.seed)
        self.client_ids = list(self.clients)
        news_params, user_params = self.model.init_params(cfg.seed)
        tr = cfg.train
        self.server = ServerState(
            news_params, user_params, self.model.encode_catalog(self.contents, news_params),
            OptimizerState(lr=tr.lr), OptimizerState(lr=tr.lr),
        )
        self.user_keys = sorted(user_params)
        self.dropout_prob = tr.dropout_prob

    @property
    def d(self) -> int:
        return self.cfg.model.d

    # -- protocol steps -------------------------------------------------------
    def _dropped(self, group: Sequence[str], t: int, attempt: int) -> set[int]:
        if self.dropout_prob <= 0:
            return set()
        rng = np.random.default_rng([self.cfg.seed, t, attempt, 0xD0])
        return {i for i in range(len(group)) if rng.random() < self.dropout_prob}

    def _channel(self, t: int, group: Sequence[str], dropped: set[int]) -> secure_agg.Channel:
        ch = secure_agg.Channel(round_id=t)
        for i in dropped:
            ch.drop.update((i, k) for k in range(len(group)))
            ch.drop.add((i, "server"))
        return ch

    def compute_news_pool(self, group: Sequence[str], t: int,
                          channel: secure_agg.Channel | None = None) -> list[int]:
        n = len(self.news_ids)
        secrets = [secure_agg.membership_vector(sorted(self.clients[u].local_news()), n) for u in group]
        h = secure_agg.secure_sum(secrets, 0, seed=self.cfg.seed, round_id=2 * t, channel=channel)
        return secure_agg.pool_from_sum(h)

    def distribute_round_payload(self, pool: Sequence[int]) -> Payload:
        pool = np.asarray(pool, dtype=np.int64)
        if pool.size and (pool.min() < 0 or pool.max() >= len(self.news_ids)):
            raise ConsistencyError("pool references news without a representation")
        return Payload(self.server.user_params.copy(), pool, self.server.news_reprs[pool].copy())

    def aggregate_gradients(self, updates: Sequence[ClientUpdate], t: int,
                            channel: secure_agg.Channel | None = None) -> Aggregate | None:
        if len(updates) < 2:
            raise ValueError("aggregation needs at least 2 contributions")
        nu = sum(np.size(updates[0].g_user[k]) for k in self.user_keys)
        shape = updates[0].g_news.shape
        vectors = [np.concatenate([flatten(u.g_user, self.user_keys), u.g_news.ravel(),
                                   [u.loss, float(u.weight)]]) for u in updates]
        total = secure_agg.secure_sum(vectors, self.cfg.train.frac_bits, seed=self.cfg.seed,
                                      round_id=2 * t + 1, channel=channel)
        weight = float(np.rint(total[-1]))
        if weight <= 0:
            return None
        g_user = {k: v / weight for k, v in unflatten(total[:nu], updates[0].g_user, self.user_keys).items()}
        g_news = (total[nu:nu + int(np.prod(shape))] / weight).reshape(shape)
        return Aggregate(g_user, g_news, weight, float(total[-2] / weight))

    def server_update_user_model(self, g_user: dict[str, np.ndarray]) -> None:
        nadam_step(self.server.user_params, g_user, self.server.user_opt)

    def news_model_gradient(self, g_news: np.ndarray, pool: Sequence[int]) -> dict[str, np.ndarray]:
        """Chain rule through the encoder: gradient of sum_i <g_news[i], n_i(W_n)>."""
        tracked = self.server.news_params.track()
        reprs = self.model.news.encode_batch([self.contents[i] for i in pool], tracked)
        return T.backward(T.sum(reprs * g_news), tracked)

    def server_update_news_model(self, g_news: np.ndarray, pool: Sequence[int], t: int) -> None:
        pool = list(pool)
        contents = [self.contents[i] for i in pool]
        nadam_step(self.server.news_params, self.news_model_gradient(g_news, pool), self.server.news_opt)
        if (t + 1) % self.cfg.train.catalog_refresh == 0:
            self.refresh_catalog()
        elif pool:
            self.server.news_reprs[pool] = self.model.encode_catalog(contents, self.server.news_params)

    def refresh_catalog(self) -> None:
        self.server.news_reprs = self.model.encode_catalog(self.contents, self.server.news_params)

    # -- a round ----------------------------------------------------------------
    def local_updates(self, group: Sequence[str], payload: Payload, t: int) -> list[ClientUpdate]:
        tr = self.cfg.train

        def work(uid):
            c = self.clients[uid]
            return client_local_train(self.model, c, payload,
                                      client_batch(c, tr.batch_size, self.cfg.seed, t), tr.clip_delta)

        if self.cfg.threads > 1:
            with ThreadPoolExecutor(self.cfg.threads) as ex:
                return list(ex.map(work, group))
        return [work(uid) for uid in group]

    def run_round(self, t: int) -> RoundState:
        tr = self.cfg.train
        start = time.perf_counter()
        m = min(tr.group_size, len(self.client_ids))
        state = RoundState(t)
        for attempt in range(tr.retry_budget + 1):
            group = sample_group(self.client_ids, m, [self.cfg.seed, t, attempt, 0x6A])
            channel = self._channel(t, group, self._dropped(group, t, attempt))
            try:
                pool = self.compute_news_pool(group, t, channel)
                state.group, state.pool, state.attempts = group, pool, attempt + 1
                if not pool:
                    state.skipped = True
                    break
                payload = self.distribute_round_payload(pool)
                updates = self.local_updates(group, payload, t)
                agg = self.aggregate_gradients(updates, t, channel)
            except secure_agg.DropoutError as exc:
                log.info("round %d attempt %d aborted: %s", t, attempt, exc)
                continue
            state.repr_payload_bytes = payload.repr_bytes * len(group)
            state.payload_bytes = (payload.repr_bytes + payload.model_bytes) * len(group)
            state.full_catalog_bytes = len(self.news_ids) * self.d * 8 * len(group)
            state.share_bytes = channel.peer_bytes + channel.server_bytes
            if agg is None:
                state.skipped = True
                break
            state.loss, state.total_weight = agg.loss, agg.total_weight
            self.server_update_user_model(agg.g_user)
            self.server_update_news_model(agg.g_news, pool, t)
            break
        else:
            raise RunFailure(f"round {t}: {tr.retry_budget + 1} attempts aborted by dropouts")
        self.server.round = t + 1
        state.wall_ms = (time.perf_counter() - start) * 1e3
        return state

    # -- evaluation (simulation harness) ------------------------------------------
    def evaluate(self, split: str | None = None) -> MetricsReport:
        return evaluate_model(self.model, self.ds, self.server.news_params, self.server.user_params,
                              split or self.cfg.train.eval_split, self.index, self.contents)

    def run(self) -> Iterator[RoundLog]:
        tr = self.cfg.train
        if self.server.round == 0:
            yield RoundLog(RoundState(0), self.evaluate())
        best, stale = -np.inf, 0
        for t in range(self.server.round, tr.max_rounds):
            state = self.run_round(t)
            metrics = None
            if (t + 1) % tr.eval_interval == 0 or t + 1 == tr.max_rounds:
                metrics = self.evaluate()
                if tr.patience:
                    if metrics.auc > best + tr.tol:
                        best, stale = metrics.auc, 0
                    else:
                        stale += 1
            state.t = t + 1
            yield RoundLog(state, metrics)
            if tr.patience and stale >= tr.patience:
                log.info("early stop after round %d", t + 1)
                break

    # -- checkpoints ----------------------------------------------------------------
    def vocab_digest(self) -> str:
        return hashlib.sha256(repr(sorted(self.ds.vocab.items())).encode()).hexdigest()

    def save(self, path) -> None:
        s = self.server
        store = {**s.news_params, **s.user_params, "server.news_reprs": s.news_reprs,
                 **s.news_opt.to_store("optim.news"), **s.user_opt.to_store("optim.user")}
        meta = {"config": self.cfg.to_dict(), "round": s.round, "news_ids": self.news_ids,
                "vocab_digest": self.vocab_digest(),
                "news_opt": s.news_opt.hyper(), "user_opt": s.user_opt.hyper()}
        save_checkpoint(path, store, meta)

    def restore(self, path) -> None:
        store, meta = load_checkpoint(path)
        if meta.get("news_ids") != self.news_ids:
            raise ConsistencyError("checkpoint catalog differs from the dataset")
        if meta.get("vocab_digest") != self.vocab_digest():
            raise ConsistencyError("checkpoint vocabulary differs from the dataset")
        s = self.server
        s.news_params.assign({k: v for k, v in store.items() if k.startswith("news.")})
        s.user_params.assign({k: v for k, v in store.items() if k.startswith("user.")})
        s.news_reprs = np.array(store["server.news_reprs"])
        s.news_opt = OptimizerState.from_store(store, "optim.news", meta["news_opt"])
        s.user_opt = OptimizerState.from_store(store, "optim.user", meta["user_opt"])
        s.round = int(meta["round"])


def evaluate_model(model: NewsRecModel, ds: Dataset, news_params, user_params, split: str,
                   index: dict[str, int] | None = None, contents=None) -> MetricsReport:
    """Rank every impression of ``split`` with freshly encoded news; cold users score 0."""
    news_ids = ds.news_ids
    index = index or {n: i for i, n in enumerate(news_ids)}
    contents = contents or [ds.catalog[n] for n in news_ids]
    reprs = model.encode_catalog(contents, news_params)
    imps = [imp for imp in ds.split(split) if len(imp.candidates) >= 2]
    uids = sorted({imp.user_id for imp in imps})
    warm = [u for u in uids if u in ds.users and ds.users[u].clicked]
    uvec = {u: np.zeros(model.cfg.d) for u in uids}
    chunk = 256
    for i in range(0, len(warm), chunk):
        part = warm[i:i + chunk]
        hists = [[index[n] for n in ds.users[u].clicked] for u in part]
        vecs = model.user.encode_batch(reprs, hists, user_params).data
        uvec.update(zip(part, vecs))
    results = []
    for imp in imps:
        rows = [index[n] for n, _ in imp.candidates]
        scores = reprs[rows] @ uvec[imp.user_id]
        results.append(evaluate_ranking(scores, [lab for _, lab in imp.candidates]))
    return summarize(results)


def run_training(ds: Dataset, cfg: RunConfig) -> list[RoundLog]:
    return list(Federation(ds, cfg).run())


# -- centralized baseline ---------------------------------------------------------

def centralized_step(fed: Federation, batches: dict[str, np.ndarray], clip_delta: float | None = None) -> float:
    """One optimizer step on the union of the given client batches, no sharing involved.

    The news encoder is differentiated end to end. Returns the batch loss.
    """
    clients = [fed.clients[u] for u in sorted(batches)]
    needed = sorted(set().union(*(c.history for c in clients)) |
                    {int(x) for u, c in zip(sorted(batches), clients)
                     for x in np.column_stack([c.positives[batches[u]], c.negatives[batches[u]]]).ravel()})
    local = {g: i for i, g in enumerate(needed)}
    hists = [[local[g] for g in c.history] for c in clients]
    rows, cands = [], []
    for r, (u, c) in enumerate(zip(sorted(batches), clients)):
        idx = batches[u]
        block = np.column_stack([c.positives[idx], c.negatives[idx]])
        cands.append(np.vectorize(local.__getitem__)(block))
        rows.extend([r] * len(idx))
    s = fed.server
    tn, tu = s.news_params.track(), s.user_params.track()
    reprs = fed.model.news.encode_batch([fed.contents[i] for i in needed], tn)
    loss = fed.model.loss_from_reprs(reprs, hists, rows, np.concatenate(cands), tu)
    grads = T.backward(loss, {**tn, **tu})
    g_news = {k: grads[k] for k in tn}
    g_user = {k: grads[k] for k in tu}
    if clip_delta is not None:
        g_news, g_user = clip_gradient_norm(g_news, clip_delta), clip_gradient_norm(g_user, clip_delta)
    nadam_step(s.news_params, g_news, s.news_opt)
    nadam_step(s.user_params, g_user, s.user_opt)
    s.news_reprs[needed] = fed.model.encode_catalog([fed.contents[i] for i in needed], s.news_params)
    return loss.item()


def centralized_train(ds: Dataset, cfg: RunConfig) -> list[RoundLog]:
    """Single trainer over all clients' samples; same model, loss, optimizer and schedule.

    Each step draws ``train.group_size`` users (as a federated round would) and
    trains on their batches jointly.
    """
    fed = Federation(ds, cfg)
    return list(_centralized_rounds(fed))


def _centralized_rounds(fed: Federation) -> Iterator[RoundLog]:
    tr = fed.cfg.train
    yield RoundLog(RoundState(0), fed.evaluate())
    m = min(tr.group_size, len(fed.client_ids))
    for t in range(tr.max_rounds):
        start = time.perf_counter()
        group = sample_group(fed.client_ids, m, [fed.cfg.seed, t, 0, 0x6A])
        batches = {u: client_batch(fed.clients[u], tr.batch_size, fed.cfg.seed, t) for u in group}
        loss = centralized_step(fed, batches, tr.clip_delta)
        state = RoundState(t + 1, group=group, loss=loss, wall_ms=(time.perf_counter() - start) * 1e3)
        metrics = fed.evaluate() if (t + 1) % tr.eval_interval == 0 or t + 1 == tr.max_rounds else None
        yield RoundLog(state, metrics)
