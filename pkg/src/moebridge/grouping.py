"""Expert role profiling and modality-aware partitioning.

Routing counts collected per (layer, expert, modality) rank each expert's
relevance to the understanding modalities (text, vit). The top scorers form
the understanding group, the remainder the generation group, and new group
routers are initialized by slicing the parent router's columns at the group
indices so selection priors survive the split unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import autograd as ag
from .moe import ExpertFFN, Router


class ModalityTag(IntEnum):
    TEXT = 0
    VIT = 1
    VAE = 2


MODALITY_NAMES = ("text", "vit", "vae")


class UsageError(ValueError):
    """Caller violated an operation's preconditions."""


class UndefinedMetricError(ValueError):
    """Metric requested over an empty selection count."""


@dataclass
class ActivationProfile:
    """Selection counts per layer, expert, and modality from routing probes."""

    n_experts: int
    k: int
    counts: dict[int, np.ndarray] = field(default_factory=dict)  # layer -> [N, 3]
    total_tokens: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def layer_counts(self, layer: int) -> np.ndarray:
        if layer not in self.counts:
            self.counts[layer] = np.zeros((self.n_experts, 3), dtype=np.int64)
        return self.counts[layer]

    def tally(self, layer: int, expert_ids: np.ndarray, tags: np.ndarray) -> None:
        table = self.layer_counts(layer)
        k = expert_ids.shape[1]
        for m in range(3):
            rows = tags == m
            if rows.any():
                table[:, m] += np.bincount(expert_ids[rows].reshape(-1),
                                           minlength=self.n_experts)
        assert k == self.k

    def layers(self) -> list[int]:
        return sorted(self.counts)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"schema": "profile/1", "n_experts": self.n_experts, "k": self.k,
                      "total_text": int(self.total_tokens[0]),
                      "total_vit": int(self.total_tokens[1]),
                      "total_vae": int(self.total_tokens[2])}
            fh.write(json.dumps(header) + "\n")
            for layer in self.layers():
                table = self.counts[layer]
                rec = {"layer": layer,
                       "counts_text": table[:, 0].tolist(),
                       "counts_vit": table[:, 1].tolist(),
                       "counts_vae": table[:, 2].tolist()}
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "ActivationProfile":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != "profile/1":
                raise UsageError(f"{path} is not an activation profile")
            profile = cls(n_experts=header["n_experts"], k=header["k"])
            profile.total_tokens = np.array([header["total_text"], header["total_vit"],
                                             header["total_vae"]], dtype=np.int64)
            for line in fh:
                rec = json.loads(line)
                profile.counts[rec["layer"]] = np.stack(
                    [np.array(rec["counts_text"], dtype=np.int64),
                     np.array(rec["counts_vit"], dtype=np.int64),
                     np.array(rec["counts_vae"], dtype=np.int64)], axis=1)
        return profile


def profile_activations(model, batches, k: int | None = None) -> ActivationProfile:
    """Tally top-k expert selections per layer and modality over probe batches.

    Routing runs without capacity limits and without learning. Batches are
    (tokens, tags) pairs accepted by the model's forward; tags may be a
    single ModalityTag or a per-token array.
    """
    if not batches:
        raise UsageError("profile_activations needs at least one batch")
    k = k if k is not None else model.config.top_k
    profile = ActivationProfile(n_experts=model.config.n_experts, k=k)
    for sheet in batches:
        with ag.no_grad():
            result = model.forward(sheet, collect_stats=True, capacity_off=True)
        tags = sheet.tags
        for m in range(3):
            profile.total_tokens[m] += int((tags == m).sum())
        for layer_idx, layer_stats in enumerate(result.stats.layers):
            for group_stats in layer_stats.values():
                ids = group_stats.original_ids(group_stats.decision.expert_ids)
                profile.tally(layer_idx, ids, tags[group_stats.rows])
    return profile


def imbalance_ratio(profile: ActivationProfile, layer: int, modality: ModalityTag) -> float:
    """Max over mean of per-expert selection counts; 1.0 is uniform."""
    counts = profile.counts.get(layer)
    if counts is None or counts[:, int(modality)].sum() == 0:
        raise UndefinedMetricError(f"no {MODALITY_NAMES[int(modality)]} counts for layer {layer}")
    column = counts[:, int(modality)].astype(np.float64)
    return float(column.max() / column.mean())


def selection_std(profile: ActivationProfile, layer: int, modality: ModalityTag) -> float:
    """Population standard deviation of per-expert selection counts."""
    counts = profile.counts.get(layer)
    if counts is None or counts[:, int(modality)].sum() == 0:
        raise UndefinedMetricError(f"no {MODALITY_NAMES[int(modality)]} counts for layer {layer}")
    column = counts[:, int(modality)].astype(np.float64)
    return float(np.sqrt(((column - column.mean()) ** 2).mean()))


@dataclass
class PartitionSpec:
    """Disjoint expert index sets covering one layer's expert pool."""

    strategy: str
    und_ids: list[int]
    gen_ids: list[int]
    text_ids: list[int] | None = None
    vit_ids: list[int] | None = None

    def validate(self, n_experts: int) -> None:
        combined = sorted(self.und_ids + self.gen_ids)
        if combined != list(range(n_experts)):
            raise UsageError("partition must cover all experts exactly once")
        if self.strategy == "tripartite":
            if sorted((self.text_ids or []) + (self.vit_ids or [])) != sorted(self.und_ids):
                raise UsageError("tripartite text/vit ids must cover the understanding ids")

    def groups(self) -> dict[str, list[int]]:
        if self.strategy == "tripartite":
            return {"text": list(self.text_ids), "vit": list(self.vit_ids),
                    "gen": list(self.gen_ids)}
        return {"und": list(self.und_ids), "gen": list(self.gen_ids)}


@dataclass
class PartitionPlan:
    """Per-layer partition specs (a global plan repeats one spec)."""

    n_experts: int
    strategy: str
    specs: dict[int, PartitionSpec]
    global_spec: PartitionSpec | None = None

    def spec_for(self, layer: int) -> PartitionSpec:
        if self.global_spec is not None:
            return self.global_spec
        if layer not in self.specs:
            raise UsageError(f"no partition stored for layer {layer}")
        return self.specs[layer]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"schema": "partition/1", "n_experts": self.n_experts,
                      "strategy": self.strategy,
                      "scope": "global" if self.global_spec is not None else "per_layer"}
            fh.write(json.dumps(header) + "\n")
            items = [(-1, self.global_spec)] if self.global_spec is not None \
                else sorted(self.specs.items())
            for layer, spec in items:
                rec = {"layer": layer, "und": spec.und_ids, "gen": spec.gen_ids}
                if spec.text_ids is not None:
                    rec["text"] = spec.text_ids
                    rec["vit"] = spec.vit_ids
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != "partition/1":
                raise UsageError(f"{path} is not a partition file")
            plan = cls(n_experts=header["n_experts"], strategy=header["strategy"], specs={})
            for line in fh:
                rec = json.loads(line)
                spec = PartitionSpec(strategy=header["strategy"], und_ids=rec["und"],
                                     gen_ids=rec["gen"], text_ids=rec.get("text"),
                                     vit_ids=rec.get("vit"))
                spec.validate(plan.n_experts)
                if header["scope"] == "global":
                    plan.global_spec = spec
                else:
                    plan.specs[rec["layer"]] = spec
        return plan


def _rank_by_score(scores: np.ndarray, n_take: int) -> tuple[list[int], list[int]]:
    order = np.argsort(-scores, kind="stable")
    taken = sorted(int(i) for i in order[:n_take])
    rest = sorted(int(i) for i in order[n_take:])
    return taken, rest


def _bimodal_spec(counts: np.ndarray, totals: np.ndarray, n_und: int,
                  normalize: bool) -> PartitionSpec:
    if normalize:
        scores = (counts[:, 0] / max(int(totals[0]), 1)
                  + counts[:, 1] / max(int(totals[1]), 1))
    else:
        scores = (counts[:, 0] + counts[:, 1]).astype(np.float64)
    und, gen = _rank_by_score(scores, n_und)
    return PartitionSpec(strategy="bimodal", und_ids=und, gen_ids=gen)


def _tripartite_spec(counts: np.ndarray, totals: np.ndarray, n_text: int,
                     n_vit: int) -> PartitionSpec:
    s_text = counts[:, 0] / max(int(totals[0]), 1)
    s_vit = counts[:, 1] / max(int(totals[1]), 1)
    best = np.maximum(s_text, s_vit)
    text_ids: list[int] = []
    vit_ids: list[int] = []
    # experts claimed by their stronger modality first; overflow spills to the
    # other group, anything left lands in the generation group
    for i in np.argsort(-best, kind="stable"):
        i = int(i)
        prefer_text = s_text[i] >= s_vit[i]
        first, second = ("text", "vit") if prefer_text else ("vit", "text")
        for choice in (first, second):
            if choice == "text" and len(text_ids) < n_text:
                text_ids.append(i)
                break
            if choice == "vit" and len(vit_ids) < n_vit:
                vit_ids.append(i)
                break
    text_ids = sorted(text_ids)
    vit_ids = sorted(vit_ids)
    und = sorted(text_ids + vit_ids)
    gen = sorted(set(range(counts.shape[0])) - set(und))
    return PartitionSpec(strategy="tripartite", und_ids=und, gen_ids=gen,
                         text_ids=text_ids, vit_ids=vit_ids)


def partition_experts(profile: ActivationProfile, n_und: int, strategy: str = "bimodal",
                      per_layer: bool = True, normalize: bool = False,
                      n_text: int | None = None, n_vit: int | None = None) -> PartitionPlan:
    """Rank experts by understanding-modality usage and split the pool.

    Bimodal sums text and vit counts (optionally normalized by modality
    token totals) and keeps the top ``n_und`` per layer. Tripartite ranks
    text and vit separately; an expert wanted by both goes to the modality
    with the higher normalized score. Ties always break to the lower index.
    """
    if n_und >= profile.n_experts or n_und < 1:
        raise UsageError(f"n_und={n_und} must be in [1, {profile.n_experts - 1}]")
    if profile.total_tokens[0] == 0 or profile.total_tokens[1] == 0:
        raise UsageError("profile must cover both text and vit tokens")
    if strategy not in ("bimodal", "tripartite"):
        raise UsageError(f"unknown strategy {strategy!r}")
    if strategy == "tripartite":
        n_text = n_text if n_text is not None else (n_und + 1) // 2
        n_vit = n_vit if n_vit is not None else n_und - n_text
        if n_text + n_vit != n_und:
            raise UsageError("n_text + n_vit must equal n_und")

    def build(counts: np.ndarray) -> PartitionSpec:
        if strategy == "bimodal":
            spec = _bimodal_spec(counts, profile.total_tokens, n_und, normalize)
        else:
            spec = _tripartite_spec(counts, profile.total_tokens, n_text, n_vit)
        spec.validate(profile.n_experts)
        return spec

    if per_layer:
        specs = {layer: build(profile.counts[layer]) for layer in profile.layers()}
        return PartitionPlan(profile.n_experts, strategy, specs)
    summed = sum(profile.counts[layer] for layer in profile.layers())
    return PartitionPlan(profile.n_experts, strategy, {}, global_spec=build(summed))


@dataclass
class GroupedRouters:
    """Group routers sliced column-wise from one parent router."""

    routers: dict[str, Router]
    index_map: dict[str, list[int]]


def slice_router(parent: Router, spec: PartitionSpec) -> GroupedRouters:
    """Initialize group routers from the parent's columns at group indices."""
    n = parent.n_experts
    routers: dict[str, Router] = {}
    index_map: dict[str, list[int]] = {}
    for group, ids in spec.groups().items():
        if any(i < 0 or i >= n for i in ids):
            raise UsageError(f"group {group!r} index out of range for {n} experts")
        routers[group] = Router(ag.param(parent.w.data[:, ids].copy()))
        index_map[group] = list(ids)
    return GroupedRouters(routers, index_map)


def inherit_experts(parent_layer, spec: PartitionSpec):
    """Deep-copy parent experts into their groups; shared experts copy as-is."""
    pool: list[ExpertFFN] = parent_layer.experts["all"]
    grouped = {group: [pool[i].copy() for i in ids] for group, ids in spec.groups().items()}
    shared = [s.copy() for s in parent_layer.shared]
    return grouped, shared
