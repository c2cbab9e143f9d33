"""Transformer models over one shared skeleton and three MoE wirings.

Modes:
  standard  - one router over the whole expert pool, shared experts kept,
              modality-blind routing.
  isolated  - experts split into understanding/generation groups with their
              own routers, shared experts removed (pure separation).
  bridged   - the grouped split plus always-on shared experts; generative
              tokens forward through the shared experts but their backward
              flow is stopped during warmup and scaled by a constant after.

A fourth inference-only mode masks every routed expert so only the shared
experts (and the non-MoE skeleton) act, used to probe what the shared
parameters alone have learned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .grouping import (GroupedRouters, ModalityTag, PartitionPlan, PartitionSpec,
                       UsageError, inherit_experts, slice_router)
from .moe import ExpertFFN, Router, RoutingDecision, apply_capacity, route, routed_forward
from .rng import Rng, mix_key
from . import tensorio

NEG_INF = -1e30


class ArchitectureMode(str, Enum):
    STANDARD = "standard"
    ISOLATED = "isolated"
    BRIDGED = "bridged"
    SHARED_ONLY = "shared_only"


GROUPED_MODES = (ArchitectureMode.ISOLATED, ArchitectureMode.BRIDGED)


@dataclass
class ModelConfig:
    d_model: int = 32
    d_ff: int = 64
    n_experts: int = 16
    top_k: int = 2
    n_shared: int = 1
    n_layers: int = 2
    vocab_size: int = 64
    d_latent: int = 8
    d_vit: int = 8
    t_feat_dim: int = 8
    capacity_factor: float = 1.0


@dataclass
class ShieldState:
    """Warmup gradient shield: stop generative gradients into shared experts
    while ``step < warmup_steps``, scale them by ``scale_after`` afterwards."""

    step: int
    warmup_steps: int
    scale_after: float = 0.1

    @property
    def active(self) -> bool:
        return self.step < self.warmup_steps


@dataclass
class GroupStats:
    group: str
    rows: np.ndarray
    decision: RoutingDecision
    index_map: list[int] | None

    def original_ids(self, ids: np.ndarray) -> np.ndarray:
        if self.index_map is None:
            return ids
        return np.asarray(self.index_map, dtype=np.int64)[ids]


@dataclass
class ForwardStats:
    layers: list[dict[str, GroupStats]] = field(default_factory=list)


@dataclass
class ForwardResult:
    hidden: Tensor
    vocab_logits: Tensor
    velocity: Tensor | None
    stats: ForwardStats | None


class AttentionBlock:
    """Single-head causal attention, identical across all MoE modes."""

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo

    @classmethod
    def init(cls, rng: Rng, d_model: int) -> "AttentionBlock":
        s = 1.0 / math.sqrt(d_model)
        return cls(*(ag.param(rng.normals((d_model, d_model)) * s) for _ in range(4)))

    def __call__(self, x3: Tensor, mask: np.ndarray) -> Tensor:
        q = ag.matmul(x3, self.wq)
        k = ag.matmul(x3, self.wk)
        v = ag.matmul(x3, self.wv)
        scores = ag.add(ag.mul(ag.bmm(q, ag.transpose_last(k)),
                               1.0 / math.sqrt(q.shape[-1])), mask)
        return ag.matmul(ag.bmm(ag.softmax(scores, axis=-1), v), self.wo)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]


def _causal_mask(n_seqs: int, seq_len: int) -> np.ndarray:
    mask = np.triu(np.full((seq_len, seq_len), NEG_INF), k=1)
    return np.broadcast_to(mask, (n_seqs, seq_len, seq_len))


class MoELayer:
    """Routed expert groups plus always-on shared experts for one block."""

    def __init__(self, routers: dict[str, Router], experts: dict[str, list[ExpertFFN]],
                 index_map: dict[str, list[int]] | None, shared: list[ExpertFFN],
                 top_k: int, capacity_factor: float):
        self.routers = routers
        self.experts = experts
        self.index_map = index_map
        self.shared = shared
        self.top_k = top_k
        self.capacity_factor = capacity_factor

    @property
    def groups(self) -> list[str]:
        return sorted(self.routers)

    def _rows_for_group(self, group: str, tags: np.ndarray) -> np.ndarray:
        if group == "all":
            return np.arange(tags.shape[0])
        if group == "und":
            return np.nonzero(tags != int(ModalityTag.VAE))[0]
        if group == "text":
            return np.nonzero(tags == int(ModalityTag.TEXT))[0]
        if group == "vit":
            return np.nonzero(tags == int(ModalityTag.VIT))[0]
        if group == "gen":
            return np.nonzero(tags == int(ModalityTag.VAE))[0]
        raise UsageError(f"unknown expert group {group!r}")

    def forward(self, x: Tensor, tags: np.ndarray, shield: ShieldState | None = None,
                routed_masked: bool = False, capacity_off: bool = False,
                stats: ForwardStats | None = None) -> Tensor:
        n_tokens = x.shape[0]
        out = Tensor(np.zeros((n_tokens, x.shape[1])))
        layer_stats: dict[str, GroupStats] = {}
        if not routed_masked:
            for group in self.groups:
                rows = self._rows_for_group(group, tags)
                if rows.size == 0:
                    continue
                xg = ag.take_rows(x, rows, unique=True)
                k = min(self.top_k, self.routers[group].n_experts)
                decision = route(self.routers[group], xg, k)
                if not capacity_off:
                    decision = apply_capacity(decision, self.routers[group].n_experts,
                                              self.capacity_factor)
                yg = routed_forward(self.experts[group], decision, xg)
                out = ag.add(out, ag.scatter_rows(yg, rows, n_tokens, unique=True))
                layer_stats[group] = GroupStats(
                    group, rows, decision,
                    None if self.index_map is None else self.index_map[group])
        out = self._add_shared(out, x, tags, shield)
        if stats is not None:
            stats.layers.append(layer_stats)
        return out

    def _add_shared(self, out: Tensor, x: Tensor, tags: np.ndarray,
                    shield: ShieldState | None) -> Tensor:
        if not self.shared:
            return out
        vae_rows = np.nonzero(tags == int(ModalityTag.VAE))[0]
        if shield is None or vae_rows.size == 0:
            for s in self.shared:
                out = ag.add(out, s(x))
            return out
        # generative tokens take the shared path forward, but the whole
        # branch (expert weights and upstream activations) is cut off or
        # attenuated on the backward pass
        other_rows = np.nonzero(tags != int(ModalityTag.VAE))[0]
        n_tokens = x.shape[0]
        for s in self.shared:
            if other_rows.size:
                out = ag.add(out, ag.scatter_rows(s(ag.take_rows(x, other_rows, unique=True)),
                                                  other_rows, n_tokens, unique=True))
            branch = s(ag.take_rows(x, vae_rows, unique=True))
            if shield.active:
                branch = ag.stop_gradient(branch)
            else:
                branch = ag.scale_gradient(branch, shield.scale_after)
            out = ag.add(out, ag.scatter_rows(branch, vae_rows, n_tokens, unique=True))
        return out

    def parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for group in self.groups:
            named.append((f"{group}.router", self.routers[group].w))
            for j, e in enumerate(self.experts[group]):
                named.append((f"{group}.experts.{j}.w1", e.w1))
                named.append((f"{group}.experts.{j}.w2", e.w2))
        for j, s in enumerate(self.shared):
            named.append((f"shared.{j}.w1", s.w1))
            named.append((f"shared.{j}.w2", s.w2))
        return named


def _timestep_features(t_values: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 2.0 ** np.arange(half) * (2.0 * np.pi)
    angles = t_values[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Model:
    """Embedding, per-layer attention + MoE blocks, and two output heads."""

    def __init__(self, config: ModelConfig, mode: ArchitectureMode,
                 embed: Tensor, vit_proj: Tensor, vae_proj: Tensor, time_proj: Tensor,
                 attn_blocks: list[AttentionBlock], moe_layers: list[MoELayer],
                 vocab_head: Tensor, velocity_head: Tensor,
                 partition: PartitionPlan | None = None):
        self.config = config
        self.mode = mode
        self.embed = embed
        self.vit_proj = vit_proj
        self.vae_proj = vae_proj
        self.time_proj = time_proj
        self.attn_blocks = attn_blocks
        self.moe_layers = moe_layers
        self.vocab_head = vocab_head
        self.velocity_head = velocity_head
        self.partition = partition

    # ------------------------------------------------------------------
    def _embed_sheet(self, sheet) -> Tensor:
        tags = sheet.tags
        if not np.isin(tags, (0, 1, 2)).all():
            raise UsageError("unknown modality tag in batch")
        n_tokens = tags.shape[0]
        x = Tensor(np.zeros((n_tokens, self.config.d_model)))
        text_rows = np.nonzero(tags == int(ModalityTag.TEXT))[0]
        vit_rows = np.nonzero(tags == int(ModalityTag.VIT))[0]
        vae_rows = np.nonzero(tags == int(ModalityTag.VAE))[0]
        if text_rows.size:
            emb = ag.embedding(self.embed, sheet.token_ids[text_rows])
            x = ag.add(x, ag.scatter_rows(emb, text_rows, n_tokens, unique=True))
        if vit_rows.size:
            proj = ag.matmul(Tensor(sheet.vit_feats[vit_rows]), self.vit_proj)
            x = ag.add(x, ag.scatter_rows(proj, vit_rows, n_tokens, unique=True))
        if vae_rows.size:
            proj = ag.matmul(Tensor(sheet.latents[vae_rows]), self.vae_proj)
            feats = _timestep_features(sheet.t_values[vae_rows], self.config.t_feat_dim)
            proj = ag.add(proj, ag.matmul(Tensor(feats), self.time_proj))
            x = ag.add(x, ag.scatter_rows(proj, vae_rows, n_tokens, unique=True))
        return x

    def forward(self, sheet, shield: ShieldState | None = None,
                collect_stats: bool = False, capacity_off: bool = False,
                routed_masked: bool = False) -> ForwardResult:
        stats = ForwardStats() if collect_stats else None
        n_seqs, seq_len = sheet.n_seqs, sheet.seq_len
        mask = _causal_mask(n_seqs, seq_len)
        x = self._embed_sheet(sheet)
        use_shield = shield if self.mode == ArchitectureMode.BRIDGED else None
        for attn, moe in zip(self.attn_blocks, self.moe_layers):
            h3 = ag.reshape(x, (n_seqs, seq_len, self.config.d_model))
            a = attn(ag.rms_norm(h3), mask)
            x = ag.add(x, ag.reshape(a, (n_seqs * seq_len, self.config.d_model)))
            m = moe.forward(ag.rms_norm(x), sheet.tags, shield=use_shield,
                            routed_masked=routed_masked, capacity_off=capacity_off,
                            stats=stats)
            x = ag.add(x, m)
        hidden = ag.rms_norm(x)
        vocab_logits = ag.matmul(hidden, self.vocab_head)
        vae_rows = np.nonzero(sheet.tags == int(ModalityTag.VAE))[0]
        velocity = None
        if vae_rows.size:
            velocity = ag.matmul(ag.take_rows(hidden, vae_rows, unique=True), self.velocity_head)
        return ForwardResult(hidden, vocab_logits, velocity, stats)

    # ------------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("embed", self.embed), ("vit_proj", self.vit_proj),
                 ("vae_proj", self.vae_proj), ("time_proj", self.time_proj)]
        for i, block in enumerate(self.attn_blocks):
            named.extend((f"layers.{i}.attn.{n}", p) for n, p in block.parameters())
        for i, layer in enumerate(self.moe_layers):
            named.extend((f"layers.{i}.moe.{n}", p) for n, p in layer.parameters())
        named.append(("vocab_head", self.vocab_head))
        named.append(("velocity_head", self.velocity_head))
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        index_maps = None
        if self.mode in GROUPED_MODES:
            index_maps = [{g: list(m) for g, m in layer.index_map.items()}
                          for layer in self.moe_layers]
        metadata = {"mode": self.mode.value, "config": asdict(self.config),
                    "index_maps": index_maps}
        records = [(name, p.data) for name, p in self.named_parameters()]
        tensorio.save_checkpoint(path, records, metadata)

    @classmethod
    def load(cls, path) -> "Model":
        records, metadata = tensorio.load_checkpoint(path)
        config = ModelConfig(**metadata["config"])
        mode = ArchitectureMode(metadata["mode"])
        if mode in GROUPED_MODES:
            plan = PartitionPlan(config.n_experts, "custom", specs={})
            for layer_idx, index_map in enumerate(metadata["index_maps"]):
                groups = {g: list(ids) for g, ids in index_map.items()}
                gen = groups.pop("gen")
                und = sorted(i for ids in groups.values() for i in ids)
                spec = PartitionSpec(strategy="custom", und_ids=und, gen_ids=gen)
                if set(groups) == {"text", "vit"}:
                    spec.strategy = "tripartite"
                    spec.text_ids, spec.vit_ids = groups["text"], groups["vit"]
                elif set(groups) == {"und"}:
                    spec.und_ids = groups["und"]
                spec.validate(config.n_experts)
                plan.specs[layer_idx] = spec
            model = build_model(config, mode, partition=plan, seed=0)
        else:
            model = build_model(config, mode, seed=0)
        named = dict(model.named_parameters())
        if set(named) != set(records):
            raise ValueError(f"checkpoint records do not match model structure in {path}")
        for name, array in records.items():
            named[name].data = array.copy()
        return model


def probe_shared_only(model: Model, sheet) -> ForwardResult:
    """Inference with every routed expert hard-masked to zero contribution."""
    return model.forward(sheet, routed_masked=True)


def _fresh_grouped_layer(config: ModelConfig, spec: PartitionSpec, rng: Rng,
                         with_shared: bool) -> MoELayer:
    routers = {}
    experts = {}
    index_map = {}
    for group, ids in spec.groups().items():
        routers[group] = Router.init(rng, config.d_model, len(ids))
        experts[group] = [ExpertFFN.init(rng, config.d_model, config.d_ff) for _ in ids]
        index_map[group] = list(ids)
    shared = [ExpertFFN.init(rng, config.d_model, config.d_ff)
              for _ in range(config.n_shared)] if with_shared else []
    return MoELayer(routers, experts, index_map, shared, config.top_k,
                    config.capacity_factor)


def build_model(config: ModelConfig, mode: ArchitectureMode | str,
                partition: PartitionPlan | None = None, parent: Model | None = None,
                seed: int = 0) -> Model:
    """Assemble a model; grouped modes inherit experts and slice routers from
    the parent when one is given, otherwise initialize fresh groups."""
    mode = ArchitectureMode(mode)
    if mode == ArchitectureMode.SHARED_ONLY:
        raise UsageError("shared_only is an inference mode; build bridged or standard")
    if mode in GROUPED_MODES and partition is None:
        raise UsageError(f"mode {mode.value} requires a partition")

    def stream(tag: str) -> Rng:
        return Rng(mix_key(seed, "model", tag))

    if parent is not None:
        embed = ag.param(parent.embed.data.copy())
        vit_proj = ag.param(parent.vit_proj.data.copy())
        vae_proj = ag.param(parent.vae_proj.data.copy())
        time_proj = ag.param(parent.time_proj.data.copy())
        attn_blocks = [AttentionBlock(*(ag.param(p.data.copy()) for _, p in b.parameters()))
                       for b in parent.attn_blocks]
        vocab_head = ag.param(parent.vocab_head.data.copy())
        velocity_head = ag.param(parent.velocity_head.data.copy())
    else:
        d = config.d_model
        embed = ag.param(stream("embed").normals((config.vocab_size, d)) / math.sqrt(d))
        vit_proj = ag.param(stream("vit_proj").normals((config.d_vit, d))
                            / math.sqrt(config.d_vit))
        vae_proj = ag.param(stream("vae_proj").normals((config.d_latent, d))
                            / math.sqrt(config.d_latent))
        time_proj = ag.param(stream("time_proj").normals((config.t_feat_dim, d))
                             / math.sqrt(config.t_feat_dim))
        attn_blocks = [AttentionBlock.init(stream(f"attn.{i}"), d)
                       for i in range(config.n_layers)]
        vocab_head = ag.param(stream("vocab_head").normals((d, config.vocab_size))
                              / math.sqrt(d))
        velocity_head = ag.param(stream("velocity_head").normals((d, config.d_latent))
                                 / math.sqrt(d))

    moe_layers: list[MoELayer] = []
    for i in range(config.n_layers):
        rng = stream(f"moe.{i}")
        if mode == ArchitectureMode.STANDARD:
            if parent is not None:
                routers = {"all": Router(ag.param(parent.moe_layers[i].routers["all"].w.data.copy()))}
                experts = {"all": [e.copy() for e in parent.moe_layers[i].experts["all"]]}
                shared = [s.copy() for s in parent.moe_layers[i].shared]
            else:
                routers = {"all": Router.init(rng, config.d_model, config.n_experts)}
                experts = {"all": [ExpertFFN.init(rng, config.d_model, config.d_ff)
                                   for _ in range(config.n_experts)]}
                shared = [ExpertFFN.init(rng, config.d_model, config.d_ff)
                          for _ in range(config.n_shared)]
            moe_layers.append(MoELayer(routers, experts, None, shared, config.top_k,
                                       config.capacity_factor))
            continue
        spec = partition.spec_for(i)
        with_shared = mode == ArchitectureMode.BRIDGED
        if parent is None:
            moe_layers.append(_fresh_grouped_layer(config, spec, rng, with_shared))
            continue
        parent_layer = parent.moe_layers[i]
        sliced: GroupedRouters = slice_router(parent_layer.routers["all"], spec)
        grouped_experts, shared = inherit_experts(parent_layer, spec)
        moe_layers.append(MoELayer(sliced.routers, grouped_experts, sliced.index_map,
                                   shared if with_shared else [], config.top_k,
                                   config.capacity_factor))

    return Model(config, mode, embed, vit_proj, vae_proj, time_proj, attn_blocks,
                 moe_layers, vocab_head, velocity_head,
                 partition=partition if mode in GROUPED_MODES else None)
