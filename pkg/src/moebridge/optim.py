"""Parameter grouping, global-norm clipping, and the update rules.

Differential learning rates are realized through two parameter groups: the
generation-centric parameters (generation experts and router, velocity
head, latent and timestep input projections) step at lr_gen, everything
else (understanding experts and router, shared experts, embeddings,
attention, vocab head) at lr_und. A plain SGD mode exists for debugging
update arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .model import ArchitectureMode, Model

GENERATION = "generation"
UNDERSTANDING = "understanding"

_GEN_NAMES = {"vae_proj", "time_proj", "velocity_head"}


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contains NaN or infinity."""


@dataclass
class ParamGroup:
    name: str
    lr: float
    params: list[tuple[str, Tensor]]


def _is_generation_param(name: str, mode: ArchitectureMode) -> bool:
    if name in _GEN_NAMES:
        return True
    if mode == ArchitectureMode.STANDARD:
        # the whole entangled pool is exposed to generative adaptation
        return ".moe.all." in name
    return ".moe.gen." in name


def build_param_groups(model: Model, lr_gen: float, lr_und: float) -> list[ParamGroup]:
    gen: list[tuple[str, Tensor]] = []
    und: list[tuple[str, Tensor]] = []
    for name, p in model.named_parameters():
        (gen if _is_generation_param(name, model.mode) else und).append((name, p))
    groups = [ParamGroup(GENERATION, lr_gen, gen), ParamGroup(UNDERSTANDING, lr_und, und)]
    assert_group_coverage(model, groups)
    return groups


def assert_group_coverage(model: Model, groups: list[ParamGroup]) -> None:
    """Every trainable parameter sits in exactly one group."""
    seen: set[int] = set()
    total = 0
    for group in groups:
        for _, p in group.params:
            if id(p) in seen:
                raise ValueError(f"parameter assigned to more than one group in {group.name}")
            seen.add(id(p))
            total += 1
    if total != len(model.parameters()):
        raise ValueError("parameter groups do not cover the model")


def global_grad_norm(groups: list[ParamGroup]) -> float:
    total = 0.0
    for group in groups:
        for _, p in group.params:
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_gradients(groups: list[ParamGroup], max_norm: float = 1.0) -> float:
    """Scale all gradients so the global norm is at most max_norm.

    Returns the pre-clip norm."""
    norm = global_grad_norm(groups)
    if norm > max_norm:
        scale = max_norm / norm
        for group in groups:
            for _, p in group.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
    return norm


def _check_finite(name: str, grad: np.ndarray) -> None:
    if not np.isfinite(grad).all():
        raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")


class Adam:
    """Adam with per-group learning rates and zero weight decay.

    Update: m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;
    p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
    """

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-6):
        self.groups = groups
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {id(p): (np.zeros_like(p.data), np.zeros_like(p.data))
                      for g in groups for _, p in g.params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for group in self.groups:
            step_scale = group.lr / bc1
            for name, p in group.params:
                if p.grad is None:
                    continue
                _check_finite(name, p.grad)
                m, v = self.state[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * (p.grad * p.grad)
                denom = np.sqrt(v / bc2)
                denom += self.eps
                p.data = p.data - step_scale * m / denom

    def zero_grad(self) -> None:
        for group in self.groups:
            for _, p in group.params:
                p.grad = None


class SGD:
    """Plain p -= lr * g, used to verify the learning-rate ratio exactly."""

    def __init__(self, groups: list[ParamGroup]):
        self.groups = groups

    def step(self) -> None:
        for group in self.groups:
            for name, p in group.params:
                if p.grad is None:
                    continue
                _check_finite(name, p.grad)
                p.data = p.data - group.lr * p.grad

    def zero_grad(self) -> None:
        for group in self.groups:
            for _, p in group.params:
                p.grad = None


def make_optimizer(kind: str, groups: list[ParamGroup], beta1: float = 0.9,
                   beta2: float = 0.95, eps: float = 1e-6):
    if kind == "adam":
        return Adam(groups, beta1=beta1, beta2=beta2, eps=eps)
    if kind == "sgd":
        return SGD(groups)
    raise ValueError(f"unknown optimizer {kind!r}")
