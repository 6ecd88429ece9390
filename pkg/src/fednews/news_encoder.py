"""News encoder: title text + image feature, fused by attention over the two views."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .config import ModelConfig
from .nn import tensor as T
from .nn.layers import (additive_attention_pool, additive_weights, init_additive, init_mhsa, init_mlp,
                        mlp_forward, multi_head_self_attention)
from .nn.params import ParamStore
from .nn.tensor import ContractError, DimensionError, Tensor, as_tensor

PAD_ID = 0
OOV_ID = 1
MAX_TITLE_LEN = 30

_PUNCT = re.compile(r"[^\w\s]", flags=re.UNICODE)


@dataclass
class NewsContent:
    news_id: str
    title_tokens: list[int]
    image_feature: np.ndarray | None = None
    category: str | None = None
    title: str = ""
    subcategory: str = ""


def split_words(raw_title: str) -> list[str]:
    return _PUNCT.sub(" ", raw_title.lower()).split()


def tokenize_title(raw_title: str, vocab: Mapping[str, int], max_len: int = MAX_TITLE_LEN) -> list[int]:
    ids = [vocab.get(w, OOV_ID) for w in split_words(raw_title)][:max_len]
    return ids or [OOV_ID]


def augment_image(feature: np.ndarray | None) -> np.ndarray | None:
    """Hook for image augmentation; features arrive precomputed, so this is the identity."""
    return feature


class NewsEncoder:
    """Parameter layout and forward passes for the server-side news model.

    All parameter paths live under ``news.``.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        c = self.cfg
        store = ParamStore()
        emb = rng.normal(0.0, 0.1, size=(c.vocab_size, c.word_dim))
        emb[PAD_ID] = 0.0
        store["news.word_emb"] = emb
        width = c.word_dim
        for layer in range(c.text_layers):
            init_mhsa(store, rng, f"news.text.mhsa.{layer}", width, c.d)
            width = c.d
        init_additive(store, rng, "news.text.pool", c.d, c.query_dim)
        init_mlp(store, rng, "news.text.proj", [c.d, c.d])
        store["news.image.placeholder"] = rng.normal(0.0, 0.1, size=c.d_img)
        init_mlp(store, rng, "news.image.proj", [c.d_img, c.d])
        init_additive(store, rng, "news.fusion", c.d, c.query_dim)
        return store

    # -- text ---------------------------------------------------------------
    def _pad(self, token_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        lengths = [len(t) for t in token_lists]
        if min(lengths, default=0) < 1:
            raise ContractError("title token list must be non-empty")
        if max(lengths) > self.cfg.max_title_len:
            raise ContractError(f"title longer than {self.cfg.max_title_len} tokens")
        ids = np.full((len(token_lists), max(lengths)), PAD_ID, dtype=np.int64)
        for i, toks in enumerate(token_lists):
            ids[i, :len(toks)] = toks
        if ids.max() >= self.cfg.vocab_size or ids.min() < 0:
            raise ContractError("token id outside vocabulary")
        return ids, _length_mask(lengths)

    def encode_text_batch(self, token_lists: Sequence[Sequence[int]], params: Mapping) -> Tensor:
        ids, mask = self._pad(token_lists)
        x = T.take(as_tensor(params["news.word_emb"]), ids)
        for layer in range(self.cfg.text_layers):
            x = multi_head_self_attention(x, params, f"news.text.mhsa.{layer}", self.cfg.heads, mask)
        pooled = additive_attention_pool(x, params, "news.text.pool", mask)
        return mlp_forward(pooled, params, "news.text.proj", self.cfg.activation)

    def encode_text(self, title_tokens: Sequence[int], params: Mapping) -> Tensor:
        return T.reshape(self.encode_text_batch([title_tokens], params), (self.cfg.d,))

    # -- image --------------------------------------------------------------
    def encode_image_batch(self, features: Sequence[np.ndarray | None], params: Mapping) -> Tensor:
        n, width = len(features), self.cfg.d_img
        dense = np.zeros((n, width))
        present = np.zeros((n, 1))
        for i, f in enumerate(features):
            f = augment_image(f)
            if f is None:
                continue
            f = np.asarray(f, dtype=np.float64)
            if f.shape != (width,):
                raise DimensionError(f"image feature width {f.shape} != ({width},)")
            dense[i] = f
            present[i] = 1.0
        x = as_tensor(dense)
        if not present.all():
            x = x + T.mul(T.reshape(as_tensor(params["news.image.placeholder"]), (1, width)),
                          1.0 - present)
        return mlp_forward(x, params, "news.image.proj", self.cfg.activation)

    def encode_image(self, image_feature: np.ndarray | None, params: Mapping) -> Tensor:
        return T.reshape(self.encode_image_batch([image_feature], params), (self.cfg.d,))

    # -- fusion -------------------------------------------------------------
    def fuse_modalities(self, text_vec, image_vec, params: Mapping) -> Tensor:
        text_vec, image_vec = as_tensor(text_vec), as_tensor(image_vec)
        if text_vec.shape != image_vec.shape:
            raise DimensionError(f"modality widths differ: {text_vec.shape} vs {image_vec.shape}")
        return additive_attention_pool(T.stack([text_vec, image_vec], axis=-2), params, "news.fusion")

    def fusion_weights(self, text_vec, image_vec, params: Mapping) -> np.ndarray:
        seq = T.stack([as_tensor(text_vec), as_tensor(image_vec)], axis=-2)
        return additive_weights(seq, params, "news.fusion").data

    def encode_batch(self, contents: Sequence[NewsContent], params: Mapping) -> Tensor:
        """Representations for ``contents`` in the given order, shape ``(n, d)``."""
        if not contents:
            return Tensor(np.zeros((0, self.cfg.d)))
        mode = self.cfg.modalities
        if mode == "text":
            return self.encode_text_batch([c.title_tokens for c in contents], params)
        if mode == "image":
            return self.encode_image_batch([c.image_feature for c in contents], params)
        text = self.encode_text_batch([c.title_tokens for c in contents], params)
        image = self.encode_image_batch([c.image_feature for c in contents], params)
        return self.fuse_modalities(text, image, params)

    def encode_news(self, content: NewsContent, params: Mapping) -> Tensor:
        return T.reshape(self.encode_batch([content], params), (self.cfg.d,))


def _length_mask(lengths: Sequence[int]) -> np.ndarray:
    return np.arange(max(lengths))[None, :] < np.asarray(lengths)[:, None]
