"""User encoder: long-term and short-term interest branches combined by attention.

Histories are right-aligned when batched, so position ``short_window - 1`` of the
learned positional table always belongs to the most recent click.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import ModelConfig
from .nn import tensor as T
from .nn.layers import (additive_attention_pool, additive_weights, init_additive, init_mhsa,
                        multi_head_self_attention as multi_head)
from .nn.params import ParamStore
from .nn.tensor import DimensionError, EmptySequenceError, Tensor, as_tensor


class ColdStartError(EmptySequenceError):
    """A user with no clicks cannot be encoded."""


class MissingRepresentationError(KeyError):
    pass


@dataclass
class ClickHistory:
    user_id: str
    clicked: list[str]


@dataclass
class UserRepr:
    user_id: str
    long_vec: np.ndarray
    short_vec: np.ndarray
    combined: np.ndarray


class UserEncoder:
    """Client-side user model. Parameter paths live under ``user.``."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        c = self.cfg
        store = ParamStore()
        for branch in ("long", "short"):
            init_mhsa(store, rng, f"user.{branch}.mhsa", c.d, c.d)
            init_additive(store, rng, f"user.{branch}.pool", c.d, c.query_dim)
        store["user.short.pos"] = rng.normal(0.0, 0.1, size=(c.short_window, c.d))
        init_additive(store, rng, "user.combine", c.d, c.query_dim)
        return store

    # -- single-user ops ------------------------------------------------------
    def _check(self, reprs: Tensor) -> Tensor:
        reprs = as_tensor(reprs)
        if reprs.ndim != 2 or reprs.shape[0] == 0:
            raise ColdStartError("history must be a non-empty N x d matrix")
        if reprs.shape[1] != self.cfg.d:
            raise DimensionError(f"history width {reprs.shape[1]} != {self.cfg.d}")
        return reprs

    def encode_long_term(self, history_reprs, params: Mapping) -> Tensor:
        h = self._check(history_reprs)
        if h.shape[0] > self.cfg.n_long:
            h = T.take(h, slice(h.shape[0] - self.cfg.n_long, None))
        x = multi_head(h, params, "user.long.mhsa", self.cfg.n_user_heads)
        return additive_attention_pool(x, params, "user.long.pool")

    def encode_short_term(self, history_reprs, params: Mapping, short_window: int | None = None) -> Tensor:
        h = self._check(history_reprs)
        M = self.cfg.short_window if short_window is None else short_window
        if M < 1:
            raise ValueError("short window must be >= 1")
        if M > self.cfg.short_window:
            raise ValueError(f"short window {M} exceeds positional table {self.cfg.short_window}")
        w = min(M, h.shape[0])
        window = T.take(h, slice(h.shape[0] - w, None))
        pos = T.take(as_tensor(params["user.short.pos"]), slice(self.cfg.short_window - w, None))
        x = multi_head(window + pos, params, "user.short.mhsa", self.cfg.n_user_heads)
        return additive_attention_pool(x, params, "user.short.pool")

    def combine_interests(self, u_long, u_short, params: Mapping) -> Tensor:
        u_long, u_short = as_tensor(u_long), as_tensor(u_short)
        if u_long.shape != u_short.shape:
            raise DimensionError(f"interest widths differ: {u_long.shape} vs {u_short.shape}")
        return additive_attention_pool(T.stack([u_long, u_short], axis=-2), params, "user.combine")

    def combine_weights(self, u_long, u_short, params: Mapping) -> np.ndarray:
        seq = T.stack([as_tensor(u_long), as_tensor(u_short)], axis=-2)
        return additive_weights(seq, params, "user.combine").data

    def encode(self, history_reprs, params: Mapping) -> Tensor:
        """Final user vector from an N x d history matrix (oldest first)."""
        h = self._check(history_reprs)
        if h.shape[0] > self.cfg.n_long:
            h = T.take(h, slice(h.shape[0] - self.cfg.n_long, None))
        mode = self.cfg.interests
        if mode == "long":
            return self.encode_long_term(h, params)
        if mode == "short":
            return self.encode_short_term(h, params)
        return self.combine_interests(self.encode_long_term(h, params),
                                      self.encode_short_term(h, params), params)

    def encode_user(self, history: ClickHistory, news_reprs: Mapping[str, np.ndarray] | Callable,
                    params: Mapping) -> UserRepr:
        lookup = news_reprs if callable(news_reprs) else news_reprs.__getitem__
        clicked = history.clicked[-self.cfg.n_long:]
        if not clicked:
            raise ColdStartError(f"user {history.user_id} has no clicks")
        rows = []
        for nid in clicked:
            try:
                rows.append(np.asarray(lookup(nid), dtype=np.float64))
            except KeyError:
                raise MissingRepresentationError(nid) from None
        h = np.stack(rows)
        u_long = self.encode_long_term(h, params)
        u_short = self.encode_short_term(h, params)
        mode = self.cfg.interests
        if mode == "long":
            combined = u_long
        elif mode == "short":
            combined = u_short
        else:
            combined = self.combine_interests(u_long, u_short, params)
        return UserRepr(history.user_id, u_long.data.copy(), u_short.data.copy(), combined.data.copy())

    # -- batched path -------------------------------------------------------
    def encode_batch(self, news_matrix, histories: Sequence[Sequence[int]], params: Mapping) -> Tensor:
        """User vectors for many users at once.

        ``news_matrix`` is an (n_news, d) tensor; each history lists row indices into
        it, oldest first. Returns an (n_users, d) tensor.
        """
        news_matrix = as_tensor(news_matrix)
        c = self.cfg
        hist = [list(h)[-c.n_long:] for h in histories]
        if any(len(h) == 0 for h in hist):
            raise ColdStartError("every batched user needs at least one click")
        mode = c.interests
        u_long = u_short = None
        if mode in ("both", "long"):
            idx, mask = _right_align(hist, max(len(h) for h in hist))
            seq = T.take(news_matrix, idx)
            x = multi_head(seq, params, "user.long.mhsa", c.n_user_heads, mask)
            u_long = additive_attention_pool(x, params, "user.long.pool", mask)
        if mode in ("both", "short"):
            width = min(c.short_window, max(len(h) for h in hist))
            idx, mask = _right_align([h[-c.short_window:] for h in hist], width)
            pos = T.take(as_tensor(params["user.short.pos"]), slice(c.short_window - width, None))
            seq = T.take(news_matrix, idx) + pos
            x = multi_head(seq, params, "user.short.mhsa", c.n_user_heads, mask)
            u_short = additive_attention_pool(x, params, "user.short.pool", mask)
        if mode == "long":
            return u_long
        if mode == "short":
            return u_short
        return self.combine_interests(u_long, u_short, params)


def _right_align(hist: Sequence[Sequence[int]], width: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.zeros((len(hist), width), dtype=np.int64)
    mask = np.zeros((len(hist), width), dtype=bool)
    for i, h in enumerate(hist):
        h = list(h)[-width:]
        idx[i, width - len(h):] = h
        mask[i, width - len(h):] = True
    return idx, mask
