"""Sparse mixture-of-experts layer pieces: router, top-k gating, expert
FFNs, capacity accounting, and the load-balancing auxiliary loss.

The auxiliary loss is the Switch-Transformer-style product of assignment
fractions and mean router probabilities, scaled by the expert count, so a
perfectly uniform router scores exactly 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """Layer configuration violates a structural constraint."""


@dataclass
class MoELayerConfig:
    n_experts: int
    top_k: int
    d_model: int
    d_ff: int
    n_shared: int = 1
    capacity_factor: float = 1.0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} must be in [1, {self.n_experts}]")
        if self.d_ff < 1:
            raise ConfigError("d_ff must be at least 1")
        if self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be positive")


class ExpertFFN:
    """Two-layer feed-forward expert with SiLU activation and no biases."""

    def __init__(self, w1: Tensor, w2: Tensor):
        self.w1 = w1
        self.w2 = w2

    @classmethod
    def init(cls, rng, d_model: int, d_ff: int) -> "ExpertFFN":
        scale1 = 1.0 / math.sqrt(d_model)
        scale2 = 1.0 / math.sqrt(d_ff)
        return cls(ag.param(rng.normals((d_model, d_ff)) * scale1),
                   ag.param(rng.normals((d_ff, d_model)) * scale2))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(ag.silu(ag.matmul(x, self.w1)), self.w2)

    def copy(self) -> "ExpertFFN":
        return ExpertFFN(ag.param(self.w1.data.copy()), ag.param(self.w2.data.copy()))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2]


class Router:
    """Linear gate projection; one column of weights per governed expert."""

    def __init__(self, w: Tensor):
        self.w = w

    @classmethod
    def init(cls, rng, d_model: int, n_experts: int) -> "Router":
        return cls(ag.param(rng.normals((d_model, n_experts)) / math.sqrt(d_model)))

    @property
    def n_experts(self) -> int:
        return self.w.shape[1]


@dataclass
class RoutingDecision:
    """Per-token top-k selections for one router and batch.

    ``gates`` are softmax weights over the k selected logits (they sum to 1
    per token before any drops). ``raw_probs`` keeps the full softmax over
    all experts for the auxiliary loss and profiling. ``dropped`` marks
    assignments that exceeded expert capacity; their gate weight is kept
    but the forward pass skips them without renormalizing the rest.
    """

    expert_ids: np.ndarray   # [T, k] int64
    gates: Tensor            # [T, k]
    dropped: np.ndarray      # [T, k] bool
    raw_probs: Tensor        # [T, N]

    @property
    def n_tokens(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def k(self) -> int:
        return self.expert_ids.shape[1]


def route(router: Router, tokens: Tensor, k: int) -> RoutingDecision:
    """Select top-k experts per token by router logit, ties to lower index."""
    if not 1 <= k <= router.n_experts:
        raise ConfigError(f"k={k} out of range for router over {router.n_experts} experts")
    logits = ag.matmul(tokens, router.w)
    raw_probs = ag.softmax(logits, axis=1)
    top_vals, expert_ids = ag.top_k(logits, k)
    gates = ag.softmax(top_vals, axis=1)
    dropped = np.zeros(expert_ids.shape, dtype=bool)
    return RoutingDecision(expert_ids, gates, dropped, raw_probs)


def expert_capacity(n_tokens: int, k: int, n_experts: int, capacity_factor: float) -> int:
    return int(math.ceil(capacity_factor * n_tokens * k / n_experts))


def apply_capacity(decision: RoutingDecision, n_experts: int,
                   capacity_factor: float) -> RoutingDecision:
    """Mark assignments beyond each expert's capacity as dropped.

    Assignments are served in token order (slot order within a token); only
    the first C per expert survive, C = ceil(factor * T * k / n_experts).
    """
    cap = expert_capacity(decision.n_tokens, decision.k, n_experts, capacity_factor)
    flat = decision.expert_ids.reshape(-1)
    dropped = np.zeros(flat.shape, dtype=bool)
    for e in range(n_experts):
        hits = flat == e
        overflow = np.cumsum(hits) > cap
        dropped |= hits & overflow
    return replace(decision, dropped=dropped.reshape(decision.expert_ids.shape))


def routed_forward(experts: list[ExpertFFN], decision: RoutingDecision,
                   tokens: Tensor) -> Tensor:
    """Gate-weighted sum of expert outputs over served assignments only."""
    n_tokens = tokens.shape[0]
    out = Tensor(np.zeros((n_tokens, tokens.shape[1])))
    served = ~decision.dropped
    for i, expert in enumerate(experts):
        rows, slots = np.nonzero((decision.expert_ids == i) & served)
        if rows.size == 0:
            continue
        gate = ag.reshape(ag.take_pairs(decision.gates, rows, slots, unique=True),
                          (rows.size, 1))
        contrib = ag.mul(expert(ag.take_rows(tokens, rows, unique=True)), gate)
        out = ag.add(out, ag.scatter_rows(contrib, rows, n_tokens, unique=True))
    return out


def moe_forward(experts: list[ExpertFFN], shared: list[ExpertFFN],
                decision: RoutingDecision, tokens: Tensor) -> Tensor:
    """Routed expert mixture plus ungated shared-expert outputs."""
    out = routed_forward(experts, decision, tokens)
    for s in shared:
        out = ag.add(out, s(tokens))
    return out


def aux_loss(decision: RoutingDecision, n_experts: int, k: int) -> Tensor:
    """Load-balance penalty N * sum_i f_i * P_i.

    f_i is the fraction of assignments (served or dropped) landing on
    expert i, treated as constant; P_i is the mean router probability, the
    only differentiable path. Uniform routing gives exactly 1.0.
    """
    if decision.n_tokens < 1:
        raise ConfigError("aux_loss needs at least one token")
    counts = np.bincount(decision.expert_ids.reshape(-1), minlength=n_experts)
    fractions = counts / (decision.n_tokens * k)
    mean_probs = ag.tmean(decision.raw_probs, axis=0)
    return n_experts * ag.tsum(ag.mul(mean_probs, Tensor(fractions)))


def capacity_rate(decision: RoutingDecision) -> float:
    """Fraction of token-expert assignments served within capacity."""
    total = decision.dropped.size
    return float((total - decision.dropped.sum()) / total)
