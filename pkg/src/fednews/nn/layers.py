"""Layers used by the news and user encoders.

Every function reads its weights from a mapping ``params`` of path -> array
or :class:`Tensor`, under a dotted ``prefix``. Inputs may carry leading batch
dimensions; attention ops accept an optional boolean ``mask`` (``True`` = real
token) over the sequence axis.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .params import ParamStore, glorot
from .tensor import DimensionError, EmptySequenceError, Tensor, as_tensor

_NEG = -1e30

ACTIVATIONS = {
    "tanh": T.tanh,
    "relu": T.relu,
    "linear": lambda x: x,
}


def _p(params: Mapping, key: str) -> Tensor:
    return as_tensor(params[key])


def _mlp_depth(params: Mapping, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    if n == 0:
        raise KeyError(f"no MLP layers under {prefix!r}")
    return n


def mlp_forward(x, params: Mapping, prefix: str, activation: str = "tanh") -> Tensor:
    """Stack of affine layers ``{prefix}.{i}.W/b``, each followed by ``activation``."""
    x = as_tensor(x)
    act = ACTIVATIONS[activation]
    for i in range(_mlp_depth(params, prefix)):
        W = _p(params, f"{prefix}.{i}.W")
        if x.shape[-1] != W.shape[0]:
            raise DimensionError(f"{prefix}.{i}: input width {x.shape[-1]} != {W.shape[0]}")
        x = act(T.matmul(x, W) + _p(params, f"{prefix}.{i}.b"))
    return x


def init_mlp(store: ParamStore, rng: np.random.Generator, prefix: str, widths: list[int]) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        store[f"{prefix}.{i}.W"] = glorot(rng, a, b)
        store[f"{prefix}.{i}.b"] = np.zeros(b)


def _mask_bias(mask: np.ndarray | None):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise EmptySequenceError("every sequence needs at least one unmasked position")
    return np.where(mask, 0.0, _NEG)


def attention_weights(seq, params: Mapping, prefix: str, heads: int,
                      mask: np.ndarray | None = None) -> Tensor:
    """Per-head attention matrices, shape ``(..., heads, L, L)``."""
    seq = as_tensor(seq)
    _, q, k, _ = _project_heads(seq, params, prefix, heads)
    return _head_softmax(q, k, mask)


def _project_heads(seq: Tensor, params: Mapping, prefix: str, heads: int):
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise EmptySequenceError("self-attention needs L >= 1")
    Wq = _p(params, f"{prefix}.Wq")
    if seq.shape[-1] != Wq.shape[0]:
        raise DimensionError(f"{prefix}: input width {seq.shape[-1]} != {Wq.shape[0]}")
    d_out = Wq.shape[1]
    if d_out % heads:
        raise DimensionError(f"{prefix}: {d_out} not divisible by {heads} heads")
    dh = d_out // heads
    lead = seq.shape[:-2]
    L = seq.shape[-2]

    def split(x: Tensor) -> Tensor:
        x = T.reshape(x, lead + (L, heads, dh))
        return T.swapaxes(x, -2, -3)  # (..., heads, L, dh)

    q = split(T.matmul(seq, Wq))
    k = split(T.matmul(seq, _p(params, f"{prefix}.Wk")))
    v = split(T.matmul(seq, _p(params, f"{prefix}.Wv")))
    return dh, q, k, v


def _head_softmax(q: Tensor, k: Tensor, mask) -> Tensor:
    dh = q.shape[-1]
    logits = T.matmul(q, k.T) * (1.0 / np.sqrt(dh))
    bias = _mask_bias(mask)
    if bias is not None:
        logits = logits + bias[..., None, None, :]
    return T.softmax(logits, axis=-1)


def multi_head_self_attention(seq, params: Mapping, prefix: str, heads: int,
                              mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product self-attention with ``heads`` heads and an output projection.

    Weights: ``Wq, Wk, Wv`` (d_in x d_out), ``Wo`` (d_out x d_out), ``bo``.
    """
    seq = as_tensor(seq)
    dh, q, k, v = _project_heads(seq, params, prefix, heads)
    attn = _head_softmax(q, k, mask)
    ctx = T.matmul(attn, v)  # (..., heads, L, dh)
    ctx = T.swapaxes(ctx, -2, -3)
    ctx = T.reshape(ctx, seq.shape[:-1] + (heads * dh,))
    return T.matmul(ctx, _p(params, f"{prefix}.Wo")) + _p(params, f"{prefix}.bo")


def init_mhsa(store: ParamStore, rng: np.random.Generator, prefix: str, d_in: int, d_out: int) -> None:
    for name in ("Wq", "Wk", "Wv"):
        store[f"{prefix}.{name}"] = glorot(rng, d_in, d_out)
    store[f"{prefix}.Wo"] = glorot(rng, d_out, d_out)
    store[f"{prefix}.bo"] = np.zeros(d_out)


def additive_weights(seq, params: Mapping, prefix: str, mask: np.ndarray | None = None) -> Tensor:
    """alpha_i = softmax_i(q . tanh(W x_i + b)) over the sequence axis."""
    seq = as_tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise EmptySequenceError("attention pooling needs L >= 1")
    W = _p(params, f"{prefix}.W")
    if seq.shape[-1] != W.shape[0]:
        raise DimensionError(f"{prefix}: input width {seq.shape[-1]} != {W.shape[0]}")
    hidden = T.tanh(T.matmul(seq, W) + _p(params, f"{prefix}.b"))
    logits = T.matmul(hidden, _p(params, f"{prefix}.q"))  # (..., L)
    bias = _mask_bias(mask)
    if bias is not None:
        logits = logits + bias
    return T.softmax(logits, axis=-1)


def additive_attention_pool(seq, params: Mapping, prefix: str,
                            mask: np.ndarray | None = None) -> Tensor:
    """Attention-weighted sum of the rows of ``seq``: ``(..., L, d) -> (..., d)``."""
    seq = as_tensor(seq)
    alpha = additive_weights(seq, params, prefix, mask)
    return T.sum(seq * T.reshape(alpha, alpha.shape + (1,)), axis=-2)


def init_additive(store: ParamStore, rng: np.random.Generator, prefix: str, d: int, query_dim: int) -> None:
    store[f"{prefix}.W"] = glorot(rng, d, query_dim)
    store[f"{prefix}.b"] = np.zeros(query_dim)
    store[f"{prefix}.q"] = rng.uniform(-0.1, 0.1, size=query_dim)
