"""Run configuration: a flat key = value text file plus CLI overrides.

Lines are ``key = value`` with ``#`` comments; keys match the RunConfig
field names below. Booleans accept true/false/1/0. Unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict, replace
from pathlib import Path

from .data import MixtureConfig
from .losses import LossWeights
from .model import ModelConfig


@dataclass
class RunConfig:
    # run identity
    mode: str = "bridged"
    seed: int = 42
    out_dir: str = "runs/default"
    run_name: str = "run"
    # schedule
    total_steps: int = 2000
    warmup_steps: int = 50
    lr_gen: float = 1e-4
    lr_und: float = 1e-6
    shield_scale: float = 0.1
    schedule: str = "mixture"          # mixture | und_only
    # losses
    lambda_disc: float = 1.0
    lambda_aux: float = 0.01
    lambda_img: float = 1.0
    # optimizer
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-6
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    # model
    d_model: int = 32
    d_ff: int = 64
    n_experts: int = 16
    top_k: int = 2
    n_shared: int = 1
    n_layers: int = 2
    vocab_size: int = 64
    d_latent: int = 8
    d_vit: int = 8
    capacity_factor: float = 1.0
    # data mixture
    ratio_t2i: int = 3
    ratio_t2i_long: int = 3
    ratio_lm: int = 2
    ratio_mmu: int = 2
    batch_seqs: int = 16
    lm_len: int = 16
    mmu_vit_len: int = 8
    mmu_text_len: int = 9
    t2i_prompt_len: int = 4
    t2i_long_prompt_len: int = 12
    latent_len: int = 24
    d_factors: int = 4
    # partitioning
    n_und: int = 12
    partition_strategy: str = "bimodal"
    partition_normalize: bool = False
    partition_global: bool = False
    partition_file: str = ""
    parent_ckpt: str = ""
    # parent pretraining (used by compare when no parent checkpoint is given)
    pretrain_steps: int = 600
    pretrain_lr: float = 1e-3
    # telemetry
    eval_every: int = 25
    eval_batch_pairs: int = 2
    eval_seqs: int = 8
    imbalance_every: int = 50
    checkpoint_every: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, d_ff=self.d_ff, n_experts=self.n_experts,
                           top_k=self.top_k, n_shared=self.n_shared, n_layers=self.n_layers,
                           vocab_size=self.vocab_size, d_latent=self.d_latent,
                           d_vit=self.d_vit, capacity_factor=self.capacity_factor)

    def mixture(self) -> MixtureConfig:
        return MixtureConfig(ratio_t2i=self.ratio_t2i, ratio_t2i_long=self.ratio_t2i_long,
                             ratio_lm=self.ratio_lm, ratio_mmu=self.ratio_mmu,
                             vocab_size=self.vocab_size, batch_seqs=self.batch_seqs,
                             lm_len=self.lm_len, mmu_vit_len=self.mmu_vit_len,
                             mmu_text_len=self.mmu_text_len,
                             t2i_prompt_len=self.t2i_prompt_len,
                             t2i_long_prompt_len=self.t2i_long_prompt_len,
                             latent_len=self.latent_len, d_latent=self.d_latent,
                             d_vit=self.d_vit, d_factors=self.d_factors)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_disc=self.lambda_disc, lambda_aux=self.lambda_aux,
                           lambda_img=self.lambda_img)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_updates(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    if overrides:
        values.update(parse_overrides(overrides))
    return RunConfig(**values)


def write_config(cfg: RunConfig, path) -> None:
    lines = [f"{key} = {value}" for key, value in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
