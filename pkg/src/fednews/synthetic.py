"""Planted-preference synthetic datasets in the MIND layout.

Each news item has a latent topic. Its title mixes topic words with background
words and its image feature is a noisy copy of a topic prototype; ``modality_mix``
moves the topic signal from text (0) to image (1). Users like a few topics and
click with probability ``sigmoid(beta * <pref, onehot(topic)>)`` where
``pref`` is +1/2 on liked topics and -1/2 elsewhere. With probability
``drift_rate`` a user's liked topics are re-drawn halfway through the history;
impressions always follow the final preference.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Dataset, assemble
from .ranking import Impression, auc_score


@dataclass
class SyntheticSpec:
    n_users: int = 50
    n_news: int = 200
    n_topics: int = 8
    d_img: int = 16
    clicks_min: int = 20
    clicks_max: int = 40
    impressions_per_user: int = 24
    K: int = 4
    drift_rate: float = 0.0
    modality_mix: float = 0.5
    beta: float = 6.0
    liked_topics: int = 2
    title_min: int = 5
    title_max: int = 10
    topic_words: int = 12
    background_words: int = 80
    text_signal: float = 0.5
    image_signal: float = 1.2
    image_noise: float = 1.0
    valid_fraction: float = 0.0
    test_fraction: float = 0.25
    min_freq: int = 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_users", "n_news", "n_topics", "d_img", "clicks_min", "clicks_max",
                     "impressions_per_user", "K", "liked_topics", "title_min", "title_max",
                     "topic_words", "background_words"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K >= self.n_news:
            raise ValueError("K must be smaller than n_news")
        if self.clicks_min > self.clicks_max or self.title_min > self.title_max:
            raise ValueError("min bounds exceed max bounds")
        if self.liked_topics >= self.n_topics:
            raise ValueError("liked_topics must be smaller than n_topics")
        if not 0.0 <= self.modality_mix <= 1.0:
            raise ValueError("modality_mix must lie in [0, 1]")
        if not 0.0 <= self.drift_rate <= 1.0:
            raise ValueError("drift_rate must lie in [0, 1]")
        if not 0.0 <= self.valid_fraction + self.test_fraction < 1.0:
            raise ValueError("valid_fraction + test_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown synthetic spec keys: {sorted(extra)}")
        spec = cls(**raw)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _timestamp(i: int) -> str:
    day, sec = divmod(i * 37, 86400)
    h, rem = divmod(sec, 3600)
    m, s = divmod(rem, 60)
    ampm = "AM" if h < 12 else "PM"
    return f"11/{day % 28 + 1}/2019 {(h % 12) or 12}:{m:02d}:{s:02d} {ampm}"


class _Generator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)

    def preference(self) -> np.ndarray:
        s = self.spec
        pref = np.full(s.n_topics, -0.5)
        pref[self.rng.choice(s.n_topics, size=s.liked_topics, replace=False)] = 0.5
        return pref

    def click_prob(self, pref: np.ndarray, topics: np.ndarray) -> np.ndarray:
        return _sigmoid(self.spec.beta * pref[topics])

    def news(self):
        s, rng = self.spec, self.rng
        topics = rng.integers(0, s.n_topics, size=s.n_news)
        protos = rng.normal(size=(s.n_topics, s.d_img))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        p_topical = (1.0 - s.modality_mix) * s.text_signal
        amp = s.modality_mix * s.image_signal
        rows, features = {}, {}
        width = len(str(s.n_news))
        ids = [f"N{i:0{width}d}" for i in range(s.n_news)]
        for i, nid in enumerate(ids):
            t = int(topics[i])
            n_words = int(rng.integers(s.title_min, s.title_max + 1))
            words = []
            for _ in range(n_words):
                if rng.random() < p_topical:
                    words.append(f"t{t}w{int(rng.integers(s.topic_words))}")
                else:
                    words.append(f"w{int(rng.integers(s.background_words))}")
            rows[nid] = {"category": f"topic{t}", "subcategory": "", "title": " ".join(words)}
            noise = rng.normal(scale=s.image_noise / np.sqrt(s.d_img), size=s.d_img)
            features[nid] = amp * protos[t] + noise
        return ids, topics, rows, features

    def clicks(self, pref: np.ndarray, topics: np.ndarray, n: int) -> list[int]:
        out: list[int] = []
        while len(out) < n:
            j = int(self.rng.integers(len(topics)))
            if self.rng.random() < self.click_prob(pref, topics[j:j + 1])[0]:
                out.append(j)
        return out

    def impression(self, pref: np.ndarray, topics: np.ndarray) -> list[tuple[int, int]]:
        s = self.spec
        order = self.rng.permutation(len(topics))
        pos, neg = None, []
        for j in order:
            clicked = self.rng.random() < self.click_prob(pref, topics[j:j + 1])[0]
            if clicked and pos is None:
                pos = int(j)
            elif not clicked and len(neg) < s.K:
                neg.append(int(j))
            if pos is not None and len(neg) == s.K:
                break
        if pos is None:
            pos = int(order[-1])
        cands = [(pos, 1)] + [(j, 0) for j in neg]
        perm = self.rng.permutation(len(cands))
        return [cands[k] for k in perm]


def generate_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    g = _Generator(spec)
    ids, topics, rows, features = g.news()
    splits = {"train": ([], {}), "valid": ([], {}), "test": ([], {})}
    user_topics: dict[str, np.ndarray] = {}
    imp_counter = 0
    n_imp = spec.impressions_per_user
    n_test = int(round(spec.test_fraction * n_imp))
    n_valid = int(round(spec.valid_fraction * n_imp))
    width = len(str(spec.n_users))
    for u in range(spec.n_users):
        uid = f"U{u:0{width}d}"
        pref = g.preference()
        n_clicks = int(g.rng.integers(spec.clicks_min, spec.clicks_max + 1))
        if g.rng.random() < spec.drift_rate:
            half = n_clicks // 2
            hist = g.clicks(pref, topics, half)
            pref = g.preference()
            hist += g.clicks(pref, topics, n_clicks - half)
        else:
            hist = g.clicks(pref, topics, n_clicks)
        history = [ids[j] for j in hist]
        user_topics[uid] = np.bincount(topics[hist], minlength=spec.n_topics) / len(hist)
        for k in range(n_imp):
            if k >= n_imp - n_test:
                name = "test"
            elif k >= n_imp - n_test - n_valid:
                name = "valid"
            else:
                name = "train"
            cands = [(ids[j], lab) for j, lab in g.impression(pref, topics)]
            imp_counter += 1
            splits[name][0].append(Impression(str(imp_counter), uid, _timestamp(imp_counter), cands))
            splits[name][1][uid] = history
    meta = {"spec": spec.to_dict(), "topics": {ids[i]: int(t) for i, t in enumerate(topics)}}
    ds = assemble(rows, features, splits, spec.min_freq, meta=meta)
    ds.meta["oracle_auc"] = topic_oracle_auc(ds, user_topics)
    return ds


def _fit_logistic(x: np.ndarray, y: np.ndarray, iters: int = 50, ridge: float = 1e-6) -> np.ndarray:
    X = np.column_stack([x, np.ones_like(x)])
    w = np.zeros(2)
    for _ in range(iters):
        p = _sigmoid(X @ w)
        grad = X.T @ (p - y) + ridge * w
        H = X.T @ (X * (p * (1 - p))[:, None]) + ridge * np.eye(2)
        step = np.linalg.solve(H, grad)
        w -= step
        if np.max(np.abs(step)) < 1e-10:
            break
    return w


def topic_oracle_auc(ds: Dataset, user_topics: dict[str, np.ndarray]) -> float:
    """Test AUC of a logistic regression that sees true topics.

    Its single feature is the share of the user's history in the candidate's topic;
    it is fit on training impressions.
    """
    topic_of = ds.meta["topics"]

    def feats(imps):
        xs, ys = [], []
        for imp in imps:
            prof = user_topics[imp.user_id]
            xs.append([prof[topic_of[n]] for n, _ in imp.candidates])
            ys.append([lab for _, lab in imp.candidates])
        return xs, ys

    xs, ys = feats(ds.train)
    w = _fit_logistic(np.concatenate(xs), np.concatenate(ys).astype(float))
    xt, yt = feats(ds.test)
    aucs = [auc_score(np.asarray(x) * w[0] + w[1], y) for x, y in zip(xt, yt)]
    aucs = [a for a in aucs if a is not None]
    return float(np.mean(aucs)) if aucs else float("nan")
