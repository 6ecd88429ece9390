"""The recommendation model split into a server-side news model and a client-side user model."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .config import ModelConfig
from .news_encoder import NewsContent, NewsEncoder
from .nn import tensor as T
from .nn.params import ParamStore
from .nn.tensor import Tensor, as_tensor
from .ranking import batch_loss
from .user_encoder import UserEncoder


class NewsRecModel:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.news = NewsEncoder(cfg)
        self.user = UserEncoder(cfg)

    def init_params(self, seed: int) -> tuple[ParamStore, ParamStore]:
        """(news_params, user_params) drawn from independent streams of ``seed``."""
        ss = np.random.SeedSequence([seed, 0xC0FFEE])
        news_seed, user_seed = ss.spawn(2)
        return (self.news.init_params(np.random.default_rng(news_seed)),
                self.user.init_params(np.random.default_rng(user_seed)))

    def encode_catalog(self, contents: Sequence[NewsContent], params: Mapping,
                       chunk: int = 512) -> np.ndarray:
        if not contents:
            return np.zeros((0, self.cfg.d))
        parts = [self.news.encode_batch(contents[i:i + chunk], params).data
                 for i in range(0, len(contents), chunk)]
        return np.concatenate(parts)

    def loss_from_reprs(self, reprs, histories: Sequence[Sequence[int]],
                        user_rows: Sequence[int], candidates: np.ndarray, params: Mapping) -> Tensor:
        """Mean ranking loss.

        ``reprs`` holds news vectors; ``histories`` index into it per user;
        sample ``b`` belongs to user ``user_rows[b]`` and scores the (K+1) rows
        ``candidates[b]`` (column 0 = click).
        """
        reprs = as_tensor(reprs)
        users = self.user.encode_batch(reprs, histories, params)          # (U, d)
        u = T.take(users, np.asarray(user_rows, dtype=np.int64))          # (B, d)
        cand = T.take(reprs, np.asarray(candidates, dtype=np.int64))      # (B, K+1, d)
        scores = T.sum(cand * T.reshape(u, (u.shape[0], 1, u.shape[1])), axis=-1)
        return batch_loss(scores)
