"""Click scoring, negative sampling, softmax ranking loss and ranking metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .nn import tensor as T
from .nn.tensor import ContractError, DimensionError, Tensor, as_tensor

log = logging.getLogger(__name__)


@dataclass
class Impression:
    impression_id: str
    user_id: str
    timestamp: str
    candidates: list[tuple[str, int]]


@dataclass
class TrainingSample:
    user_id: str
    positive: str
    negatives: list[str]

    @property
    def news_ids(self) -> list[str]:
        return [self.positive, *self.negatives]


@dataclass
class MetricsReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    n_impressions: int
    n_auc: int = 0

    def as_row(self) -> dict:
        return {"auc": self.auc, "mrr": self.mrr, "ndcg5": self.ndcg5, "ndcg10": self.ndcg10,
                "n_impressions": self.n_impressions}


def click_score(u, n) -> float:
    u, n = np.asarray(u, dtype=np.float64), np.asarray(n, dtype=np.float64)
    if u.shape != n.shape:
        raise DimensionError(f"score operands differ: {u.shape} vs {n.shape}")
    return float(u @ n)


def build_training_samples(impressions: Iterable[Impression], K: int, rng_seed,
                           stats: dict | None = None) -> list[TrainingSample]:
    """One sample per clicked candidate, paired with K non-clicked ones from its impression.

    Negatives are drawn without replacement, or with replacement when the impression
    shows fewer than K. Impressions with clicks but no non-clicks are skipped and
    counted in ``stats["skipped"]``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(rng_seed)
    out: list[TrainingSample] = []
    skipped = 0
    for imp in impressions:
        pos = [nid for nid, lab in imp.candidates if lab == 1]
        neg = [nid for nid, lab in imp.candidates if lab == 0]
        if not pos:
            continue
        if not neg:
            skipped += 1
            continue
        for p in pos:
            replace = len(neg) < K
            picks = rng.choice(len(neg), size=K, replace=replace)
            out.append(TrainingSample(imp.user_id, p, [neg[i] for i in picks]))
    if skipped:
        log.warning("skipped %d impressions with clicks but no non-clicked candidates", skipped)
    if stats is not None:
        stats["skipped"] = skipped
    return out


def sample_loss(s_pos: float, s_negs: Sequence[float]) -> float:
    """-log softmax of the positive score among {positive} + negatives."""
    s = np.concatenate([[s_pos], np.asarray(s_negs, dtype=np.float64)])
    m = s.max()
    return float(m + math.log(np.exp(s - m).sum()) - s_pos)


def batch_loss(scores) -> Tensor:
    """Mean softmax loss over rows of a (B, K+1) score matrix; column 0 is the click."""
    scores = as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ContractError("batch_loss needs a non-empty (B, K+1) score matrix")
    per_sample = T.logsumexp(scores, axis=1) - T.take(scores, (slice(None), 0))
    return T.mean(per_sample)


def mean_loss(losses: Sequence[float]) -> float:
    if len(losses) == 0:
        raise ContractError("empty batch")
    return float(np.mean(losses))


# -- metrics ------------------------------------------------------------------

def _rank_order(scores: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending original index
    return np.argsort(-scores, kind="stable")


def auc_score(scores, labels) -> float | None:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    # Mann-Whitney rank-sum form of the concordant-pair fraction; ties count 0.5
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def mrr_score(scores, labels) -> float:
    ranked = np.asarray(labels)[_rank_order(np.asarray(scores, dtype=np.float64))]
    hits = np.flatnonzero(ranked == 1)
    return 0.0 if len(hits) == 0 else 1.0 / (hits[0] + 1)


def ndcg_score(scores, labels, k: int) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    ranked = labels[_rank_order(np.asarray(scores, dtype=np.float64))][:k]
    ideal = np.sort(labels)[::-1][:k]
    # fsum is correctly rounded, so the result does not depend on summation order
    dcg = math.fsum(g / math.log2(r + 2) for r, g in enumerate(ranked))
    idcg = math.fsum(g / math.log2(r + 2) for r, g in enumerate(ideal))
    return 0.0 if idcg == 0 else dcg / idcg


def evaluate_ranking(scores, labels) -> tuple[float | None, float, float, float]:
    """Per-impression (auc, mrr, ndcg@5, ndcg@10); auc is None when undefined."""
    if len(scores) != len(labels):
        raise DimensionError("scores and labels differ in length")
    if len(scores) < 2:
        raise ContractError("an impression needs at least two candidates")
    return (auc_score(scores, labels), mrr_score(scores, labels),
            ndcg_score(scores, labels, 5), ndcg_score(scores, labels, 10))


def summarize(per_impression: Sequence[tuple[float | None, float, float, float]]) -> MetricsReport:
    if not per_impression:
        return MetricsReport(float("nan"), float("nan"), float("nan"), float("nan"), 0)
    aucs = [r[0] for r in per_impression if r[0] is not None]
    arr = np.array([r[1:] for r in per_impression])
    return MetricsReport(
        auc=float(np.mean(aucs)) if aucs else float("nan"),
        mrr=float(arr[:, 0].mean()),
        ndcg5=float(arr[:, 1].mean()),
        ndcg10=float(arr[:, 2].mean()),
        n_impressions=len(per_impression),
        n_auc=len(aucs),
    )
