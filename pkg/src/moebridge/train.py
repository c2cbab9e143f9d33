"""Training loop, evaluation, and the multi-arm comparison driver."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward
from .config import RunConfig
from .data import SyntheticWorld, Task, TokenSheet, get_world, task_for_step
from .grouping import (ModalityTag, PartitionPlan, partition_experts,
                       profile_activations, UsageError)
from .losses import LossParts, discrete_loss, image_loss_from_forward, total_loss
from .metrics import MetricsRecord, MetricsWriter, read_metrics
from .model import (ArchitectureMode, ForwardResult, GROUPED_MODES, Model, ShieldState,
                    build_model, probe_shared_only)
from .moe import aux_loss, capacity_rate
from .optim import build_param_groups, clip_gradients, make_optimizer


class TrainingAborted(RuntimeError):
    """Loss or gradients went non-finite; carries the failing step."""


@dataclass
class StepOutput:
    total: Tensor
    parts: LossParts
    aux_per_group: dict[str, float]
    result: ForwardResult


def compute_losses(model: Model, sheet: TokenSheet, shield: ShieldState | None,
                   weights) -> StepOutput:
    """Forward one sheet and assemble the weighted objective."""
    result = model.forward(sheet, shield=shield, collect_stats=True)
    disc = discrete_loss(result.vocab_logits, sheet.target_ids, sheet.target_mask)
    img = image_loss_from_forward(result, sheet)
    per_group_terms: dict[str, list[Tensor]] = {}
    for layer_stats in result.stats.layers:
        for group, gs in layer_stats.items():
            n = gs.decision.raw_probs.shape[1]
            per_group_terms.setdefault(group, []).append(
                aux_loss(gs.decision, n, gs.decision.k))
    all_terms = [t for terms in per_group_terms.values() for t in terms]
    if all_terms:
        aux = sum(all_terms[1:], start=all_terms[0]) * (1.0 / len(all_terms))
    else:
        aux = Tensor(0.0)
    aux_scalars = {g: float(np.mean([t.item() for t in terms]))
                   for g, terms in per_group_terms.items()}
    total = total_loss(LossParts(disc, aux, img), weights)
    return StepOutput(total, LossParts(disc, aux, img), aux_scalars, result)


def capacity_by_modality(result: ForwardResult, sheet: TokenSheet):
    """Served-assignment fractions overall and per modality for one forward."""
    served = {0: [0, 0], 1: [0, 0], 2: [0, 0]}  # modality -> [served, total]
    for layer_stats in result.stats.layers:
        for gs in layer_stats.values():
            tags_rows = sheet.tags[gs.rows]
            keep = ~gs.decision.dropped
            for m in (0, 1, 2):
                sel = tags_rows == m
                if sel.any():
                    served[m][0] += int(keep[sel].sum())
                    served[m][1] += int(keep[sel].size)
    per_tag = {m: (s / t if t else None) for m, (s, t) in served.items()}
    total_served = sum(s for s, _ in served.values())
    total_all = sum(t for _, t in served.values())
    overall = total_served / total_all if total_all else None
    return overall, per_tag


def imbalance_by_layer(result: ForwardResult) -> dict[str, dict[str, float]]:
    """Max-over-mean expert selection counts per layer and group this batch."""
    out: dict[str, dict[str, float]] = {}
    for i, layer_stats in enumerate(result.stats.layers):
        layer: dict[str, float] = {}
        for group, gs in layer_stats.items():
            n = gs.decision.raw_probs.shape[1]
            counts = np.bincount(gs.decision.expert_ids.reshape(-1), minlength=n)
            layer[group] = float(counts.max() / counts.mean())
        if layer:
            out[str(i)] = layer
    return out


def eval_discrete(model: Model, sheets: list[TokenSheet], routed_masked: bool = False,
                  shield: ShieldState | None = None) -> float:
    losses = []
    with ag.no_grad():
        for sheet in sheets:
            result = model.forward(sheet, shield=shield, routed_masked=routed_masked)
            losses.append(discrete_loss(result.vocab_logits, sheet.target_ids,
                                        sheet.target_mask).item())
    return float(np.mean(losses))


@dataclass
class RunResult:
    name: str
    mode: str
    out_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    manifest_path: Path
    init_eval_und: float
    final_eval_und: float
    final_eval_probe: float | None
    records: list[MetricsRecord] = field(default_factory=list)


def run_training(cfg: RunConfig, model: Model | None = None,
                 partition: PartitionPlan | None = None,
                 world: SyntheticWorld | None = None) -> RunResult:
    """Train one arm to completion, emitting metrics, manifest, checkpoint."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = ArchitectureMode(cfg.mode)
    world = world or get_world(cfg.mixture(), cfg.seed)

    if model is None:
        parent = Model.load(cfg.parent_ckpt) if cfg.parent_ckpt else None
        if mode in GROUPED_MODES and partition is None:
            if not cfg.partition_file:
                raise UsageError(f"mode {mode.value} needs a partition "
                                 "(set partition_file or pass one)")
            partition = PartitionPlan.load(cfg.partition_file)
        model = build_model(cfg.model_config(), mode, partition=partition,
                            parent=parent, seed=cfg.seed)

    groups = build_param_groups(model, cfg.lr_gen, cfg.lr_und)
    optimizer = make_optimizer(cfg.optimizer, groups, beta1=cfg.adam_beta1,
                               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    weights = cfg.loss_weights()
    eval_sheets = world.eval_batches(cfg.eval_batch_pairs, cfg.eval_seqs)

    metrics_path = out_dir / "metrics.jsonl"
    timing_path = out_dir / "timing.txt"
    ckpt_path = out_dir / "model.ckpt"
    manifest_path = out_dir / "manifest.json"

    init_eval = eval_discrete(model, eval_sheets)
    last_task_loss: dict[str, float] = {}
    started = time.time()
    records: list[MetricsRecord] = []

    with MetricsWriter(metrics_path, cfg.run_name) as sink, \
            open(timing_path, "w", encoding="utf-8") as timing:
        for step in range(1, cfg.total_steps + 1):
            t0 = time.perf_counter()
            task = task_for_step(step, cfg.schedule)
            sheet = world.batch(task, step)
            shield = ShieldState(step - 1, cfg.warmup_steps, cfg.shield_scale)
            out = compute_losses(model, sheet, shield, weights)
            total_value = out.total.item()
            if not np.isfinite(total_value):
                raise TrainingAborted(f"non-finite loss {total_value} at step {step} "
                                      f"(task {task.value})")
            backward(out.total)
            grad_norm = clip_gradients(groups, cfg.clip_norm)
            optimizer.step()
            optimizer.zero_grad()

            task_loss = (out.parts.image.item() if task in (Task.T2I, Task.T2I_LONG)
                         else out.parts.discrete.item())
            last_task_loss[task.value] = task_loss
            overall_cap, cap_tags = capacity_by_modality(out.result, sheet)
            counts = sheet.tag_counts()
            record = MetricsRecord(
                step=step, task=task.value, shield_active=shield.active,
                loss_total=total_value, loss_disc=out.parts.discrete.item(),
                loss_aux=out.parts.aux.item(),
                loss_img=out.parts.image.item() if sheet.tag_counts()[2] else None,
                loss_lm=last_task_loss.get("lm"), loss_mmu=last_task_loss.get("mmu"),
                loss_t2i=last_task_loss.get("t2i"),
                loss_t2i_long=last_task_loss.get("t2i_long"),
                aux_per_group=out.aux_per_group,
                capacity_rate=overall_cap, capacity_text=cap_tags[0],
                capacity_vit=cap_tags[1], capacity_vae=cap_tags[2],
                imbalance=(imbalance_by_layer(out.result)
                           if cfg.imbalance_every and step % cfg.imbalance_every == 0
                           else None),
                grad_norm=grad_norm,
                tokens_text=int(counts[0]), tokens_vit=int(counts[1]),
                tokens_vae=int(counts[2]))
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                record.eval_und = eval_discrete(model, eval_sheets)
                if model.mode == ArchitectureMode.BRIDGED or \
                        (model.mode == ArchitectureMode.STANDARD and model.moe_layers[0].shared):
                    record.eval_probe = eval_discrete(model, eval_sheets, routed_masked=True)
            sink.emit(record)
            records.append(record)
            timing.write(f"{step} {1000.0 * (time.perf_counter() - t0):.3f}\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                model.save(out_dir / f"model_step{step}.ckpt")

    model.save(ckpt_path)
    final = records[-1]
    manifest = {
        "run": cfg.run_name, "mode": cfg.mode, "seed": cfg.seed,
        "config": cfg.to_dict(), "started_unix": started,
        "elapsed_s": time.time() - started,
        "artifacts": {"metrics": metrics_path.name, "checkpoint": ckpt_path.name,
                      "timing": timing_path.name},
        "init_eval_und": init_eval, "final_eval_und": final.eval_und,
        "final_eval_probe": final.eval_probe,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return RunResult(cfg.run_name, cfg.mode, out_dir, metrics_path, ckpt_path,
                     manifest_path, init_eval, final.eval_und, final.eval_probe, records)


# ---------------------------------------------------------------------------
# comparison harness

ARM_NAMES = ("standard", "isolated", "bridged", "und_only")


def pretrain_parent(cfg: RunConfig, out_dir: Path, world: SyntheticWorld) -> Model:
    """Create the understanding-pretrained parent all arms adapt from."""
    pre_cfg = cfg.with_updates(
        mode="standard", schedule="und_only", total_steps=cfg.pretrain_steps,
        lr_gen=cfg.pretrain_lr, lr_und=cfg.pretrain_lr, warmup_steps=0,
        out_dir=str(out_dir / "parent"), run_name="parent",
        parent_ckpt="", partition_file="", checkpoint_every=0)
    parent_model = build_model(cfg.model_config(), ArchitectureMode.STANDARD,
                               seed=cfg.seed)
    run_training(pre_cfg, model=parent_model, world=world)
    return parent_model


def make_partition(cfg: RunConfig, parent: Model, world: SyntheticWorld) -> PartitionPlan:
    probes = [world.probe_batch(Task.LM, i) for i in range(2)]
    probes += [world.probe_batch(Task.MMU, i) for i in range(2)]
    profile = profile_activations(parent, probes)
    return partition_experts(profile, cfg.n_und, strategy=cfg.partition_strategy,
                             per_layer=not cfg.partition_global,
                             normalize=cfg.partition_normalize)


def arm_config(cfg: RunConfig, arm: str, out_dir: Path) -> RunConfig:
    updates = {"out_dir": str(out_dir / arm), "run_name": arm}
    if arm == "standard":
        updates["mode"] = "standard"
    elif arm == "isolated":
        updates["mode"] = "isolated"
    elif arm == "bridged":
        updates["mode"] = "bridged"
    elif arm == "und_only":
        updates["mode"] = "bridged"
        updates["lambda_img"] = 0.0
    elif arm == "bridged_noshield":
        updates["mode"] = "bridged"
        updates["warmup_steps"] = 0
        updates["shield_scale"] = 1.0
    else:
        raise UsageError(f"unknown arm {arm!r}")
    return cfg.with_updates(**updates)


def build_arm_model(cfg: RunConfig, arm: str, parent: Model,
                    partition: PartitionPlan) -> Model:
    mode = ArchitectureMode(arm_config(cfg, arm, Path(".")).mode)
    if mode == ArchitectureMode.STANDARD:
        return build_model(cfg.model_config(), mode, parent=parent, seed=cfg.seed)
    return build_model(cfg.model_config(), mode, partition=partition, parent=parent,
                       seed=cfg.seed)


def run_compare(cfg: RunConfig, arms: tuple[str, ...] = ARM_NAMES,
                arm_steps: dict[str, int] | None = None) -> dict[str, RunResult]:
    """Pretrain (or load) a parent, partition it, and train every arm on the
    same seed and batch stream."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = get_world(cfg.mixture(), cfg.seed)
    if cfg.parent_ckpt:
        parent = Model.load(cfg.parent_ckpt)
    else:
        parent = pretrain_parent(cfg, out_dir, world)
    partition = make_partition(cfg, parent, world)
    partition.save(out_dir / "partition.jsonl")
    results: dict[str, RunResult] = {}
    for arm in arms:
        acfg = arm_config(cfg, arm, out_dir)
        if arm_steps and arm in arm_steps:
            acfg = acfg.with_updates(total_steps=arm_steps[arm])
        model = build_arm_model(cfg, arm, parent, partition)
        results[arm] = run_training(acfg, model=model, partition=partition, world=world)
    write_summary(out_dir / "summary.txt", results)
    return results


def tail_mean(records: list[MetricsRecord], key: str, window: int = 200) -> float | None:
    values = [getattr(r, key) for r in records[-window:]
              if getattr(r, key) is not None]
    return float(np.mean(values)) if values else None


def write_summary(path: Path, results: dict[str, RunResult]) -> None:
    cols = ["arm", "mode", "init_eval_und", "final_eval_und", "final_eval_probe",
            "t2i_tail", "capacity_tail"]
    rows = []
    for arm, res in results.items():
        rows.append([
            arm, res.mode,
            f"{res.init_eval_und:.6f}", f"{res.final_eval_und:.6f}",
            "-" if res.final_eval_probe is None else f"{res.final_eval_probe:.6f}",
            _fmt(tail_mean(res.records, "loss_t2i")),
            _fmt(tail_mean(res.records, "capacity_rate"))])
    widths = [max(len(str(r[i])) for r in [cols] + rows) for i in range(len(cols))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths))
             for row in [cols] + rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.6f}"
