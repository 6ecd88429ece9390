"""NAdam and global-norm gradient clipping over named parameter maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .params import ParamStore
from .tensor import DimensionError


@dataclass
class OptimizerState:
    lr: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum_decay: float = 4e-3
    step: int = 0
    mu_product: float = 1.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_store(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.m.{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}.v.{k}": a for k, a in self.v.items()})
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "momentum_decay": self.momentum_decay, "step": self.step,
                "mu_product": self.mu_product}

    @classmethod
    def from_store(cls, store: Mapping[str, np.ndarray], prefix: str, hyper: dict) -> "OptimizerState":
        state = cls(**hyper)
        for key, arr in store.items():
            if key.startswith(prefix + ".m."):
                state.m[key[len(prefix) + 3:]] = np.array(arr)
            elif key.startswith(prefix + ".v."):
                state.v[key[len(prefix) + 3:]] = np.array(arr)
        return state


def _mu(state: OptimizerState, t: int) -> float:
    return state.beta1 * (1.0 - 0.5 * 0.96 ** (t * state.momentum_decay))


def nadam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """One Nesterov-accelerated Adam step, in place on ``params`` and ``state``.

    Uses Dozat's momentum schedule mu_t = beta1 (1 - 0.5 * 0.96^(t * momentum_decay)).
    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)[:3]}")
    state.step += 1
    t = state.step
    mu, mu_next = _mu(state, t), _mu(state, t + 1)
    state.mu_product *= mu
    bc2 = 1.0 - state.beta2 ** t
    c_grad = -state.lr * (1.0 - mu) / (1.0 - state.mu_product)
    c_mom = -state.lr * mu_next / (1.0 - state.mu_product * mu_next)
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p)
        elif np.shape(g) != p.shape:
            raise DimensionError(f"{key}: grad shape {np.shape(g)} != param shape {p.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        denom = np.sqrt(v / bc2) + state.eps
        params[key] = p + c_grad * g / denom + c_mom * m / denom


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_gradient_norm(grads: Mapping[str, np.ndarray], delta: float) -> dict[str, np.ndarray]:
    """Scale all entries by ``delta / norm`` when the global L2 norm exceeds ``delta``."""
    if not delta > 0:
        raise ValueError(f"clip threshold must be positive, got {delta}")
    norm = global_norm(grads)
    if norm <= delta:
        return {k: np.array(g) for k, g in grads.items()}
    scale = delta / norm
    return {k: g * scale for k, g in grads.items()}
