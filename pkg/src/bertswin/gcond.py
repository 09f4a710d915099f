"""Sign-momentum optimizer with a per-tensor trust ratio, and an AdamW reference.

GCond keeps a single first-moment buffer per parameter. Each step

    m     <- beta1 * m + (1 - beta1) * g
    m_hat <- m / (1 - beta1 ** (t + 1))
    lam   <- min(||p|| / (||m_hat|| + eps), lambda_clip)
    p     <- p - eta_gamma * lam * sign(m_hat)
    p     <- p * (1 - eta_gamma * weight_decay)

with norms taken over the whole tensor. AdamW keeps two buffers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class GcondHyper:
    eta_gamma: float = 1.5e-5
    beta1: float = 0.9
    eps: float = 1e-8
    lambda_clip: float = 10.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if self.lambda_clip <= 0 or self.eps < 0 or self.weight_decay < 0 or self.eta_gamma < 0:
            raise ConfigError("lambda_clip must be > 0; eps, weight_decay and eta_gamma >= 0")


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lr < 0 or self.eps < 0 or self.weight_decay < 0:
            raise ConfigError("lr, eps and weight_decay must be >= 0")


@dataclass
class OptState:
    """Auxiliary buffers keyed by buffer kind then parameter name, plus the step count."""

    kind: str
    buffers: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, kind: str, params: Mapping[str, np.ndarray]) -> "OptState":
        names = {"gcond": ("m",), "adamw": ("m", "v")}
        if kind not in names:
            raise ConfigError(f"unknown optimizer {kind!r}")
        bufs = {b: {k: np.zeros_like(_arr(p)) for k, p in params.items()} for b in names[kind]}
        return cls(kind, bufs, 0)


def _arr(p) -> np.ndarray:
    return p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p


def _check(params: Mapping, grads: Mapping, state: OptState) -> None:
    if state.t < 0:
        raise ContractError(f"step counter must be >= 0, got {state.t}")
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != np.shape(_arr(p)):
            raise ContractError(f"gradient for {name} has shape {np.shape(g)}, parameter {np.shape(_arr(p))}")
        for buf in state.buffers.values():
            if name not in buf or buf[name].shape != np.shape(_arr(p)):
                raise ContractError(f"optimizer state has no matching buffer for {name}")


def trust_ratio(p_norm: float, m_hat_norm: float, h: GcondHyper) -> float:
    if p_norm == 0.0:
        return 0.0
    denom = m_hat_norm + h.eps
    if denom == 0.0:
        return h.lambda_clip
    return min(p_norm / denom, h.lambda_clip)


def gcond_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptState, h: GcondHyper) -> dict:
    """Update ``params`` (arrays, modified in place) and ``state``; returns per-tensor trust ratios.

    Missing gradients are treated as zeros.
    """
    if state.kind != "gcond":
        raise ContractError(f"gcond_step given {state.kind} state")
    _check(params, grads, state)
    corr = 1.0 - h.beta1 ** (state.t + 1)
    lams = {}
    for name, p in params.items():
        p = _arr(p)
        g = grads.get(name)
        m = state.buffers["m"][name]
        m *= h.beta1
        if g is not None:
            m += (1.0 - h.beta1) * g
        m_hat = m / corr
        lam = trust_ratio(float(np.linalg.norm(p)), float(np.linalg.norm(m_hat)), h)
        p -= h.eta_gamma * lam * np.sign(m_hat)
        if h.weight_decay:
            p *= 1.0 - h.eta_gamma * h.weight_decay
        lams[name] = lam
    state.t += 1
    return lams


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptState, h: AdamWHyper) -> None:
    if state.kind != "adamw":
        raise ContractError(f"adamw_step given {state.kind} state")
    _check(params, grads, state)
    t = state.t + 1
    c1, c2 = 1.0 - h.beta1 ** t, 1.0 - h.beta2 ** t
    for name, p in params.items():
        p = _arr(p)
        g = grads.get(name)
        m, v = state.buffers["m"][name], state.buffers["v"][name]
        m *= h.beta1
        v *= h.beta2
        if g is not None:
            m += (1.0 - h.beta1) * g
            v += (1.0 - h.beta2) * g * g
        if h.weight_decay:
            p *= 1.0 - h.lr * h.weight_decay
        p -= h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)
    state.t = t


def state_memory_report(state: OptState) -> int:
    """Number of auxiliary scalars held by the optimizer state."""
    return int(sum(b.size for buf in state.buffers.values() for b in buf.values()))


class Optimizer:
    """Binds a parameter map (name -> Tensor) to GCond or AdamW state."""

    def __init__(self, kind: str, params: Mapping, hyper=None):
        if kind not in ("gcond", "adamw"):
            raise ConfigError(f"unknown optimizer {kind!r}; expected gcond or adamw")
        self.kind = kind
        self.params = params
        self.hyper = hyper if hyper is not None else (GcondHyper() if kind == "gcond" else AdamWHyper())
        self.state = OptState.for_params(kind, {k: _arr(p) for k, p in params.items()})
        self.last_lambdas: dict = {}

    def step(self) -> None:
        arrays = {k: _arr(p) for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if getattr(p, "grad", None) is not None}
        if self.kind == "gcond":
            self.last_lambdas = gcond_step(arrays, grads, self.state, self.hyper)
        else:
            adamw_step(arrays, grads, self.state, self.hyper)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
