"""Deterministic synthetic multimodal batches.

Every task has ground-truth learnable structure so losses have meaningful
floors and oracle fits are computable in closed form:

  lm        bigram-chain token sequences from a fixed seeded transition
            table; the reachable loss floor is the table's entropy.
  mmu       a latent factor vector z renders both a continuous vit prefix
            (a fixed linear map of z) and the discrete answer tokens
            (argmax of another linear readout of z), so answers are
            predictable from the prefix.
  t2i       bigram-sampled prompt followed by latent tokens whose clean
            target is a fixed linear function of the pooled prompt
            embedding; the model trains on noised interpolations of it.
  t2i_long  same with a longer prompt.

Batches are pure functions of (mixture, seed, task, step): the same tuple
always yields bitwise-identical arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .grouping import ModalityTag
from .rng import Rng, mix_key


class Task(str, Enum):
    LM = "lm"
    MMU = "mmu"
    T2I = "t2i"
    T2I_LONG = "t2i_long"


# 3:3:2:2 interleaved so every 10-step window sees the full mixture
SCHEDULE_PATTERN = (Task.T2I, Task.T2I_LONG, Task.LM, Task.MMU,
                    Task.T2I, Task.T2I_LONG, Task.LM, Task.MMU,
                    Task.T2I, Task.T2I_LONG)

UND_PATTERN = (Task.LM, Task.MMU)


def task_for_step(step: int, schedule: str = "mixture") -> Task:
    pattern = SCHEDULE_PATTERN if schedule == "mixture" else UND_PATTERN
    return pattern[(step - 1) % len(pattern)]


@dataclass
class MixtureConfig:
    ratio_t2i: int = 3
    ratio_t2i_long: int = 3
    ratio_lm: int = 2
    ratio_mmu: int = 2
    vocab_size: int = 64
    batch_seqs: int = 16
    lm_len: int = 16
    mmu_vit_len: int = 8
    mmu_text_len: int = 9
    t2i_prompt_len: int = 4
    t2i_long_prompt_len: int = 12
    latent_len: int = 24
    d_latent: int = 8
    d_vit: int = 8
    d_factors: int = 4

    def __post_init__(self):
        for name in ("ratio_t2i", "ratio_t2i_long", "ratio_lm", "ratio_mmu"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    def key(self) -> tuple:
        return tuple(getattr(self, f) for f in self.__dataclass_fields__)


@dataclass
class TokenSheet:
    """One batch flattened to a token sheet of equal-length sequences."""

    task: Task
    n_seqs: int
    seq_len: int
    tags: np.ndarray          # [T] int, ModalityTag values
    token_ids: np.ndarray     # [T] int, valid at text rows
    vit_feats: np.ndarray     # [T, d_vit], valid at vit rows
    latents: np.ndarray       # [T, d_latent], noised inputs at vae rows
    t_values: np.ndarray      # [T], interpolation time at vae rows
    target_ids: np.ndarray    # [T] int, next-token targets where masked
    target_mask: np.ndarray   # [T] bool, discrete-loss positions
    v_target: np.ndarray      # [T, d_latent], velocity targets at vae rows

    @property
    def n_tokens(self) -> int:
        return self.tags.shape[0]

    def tag_counts(self) -> np.ndarray:
        return np.bincount(self.tags, minlength=3)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.tags, self.token_ids, self.vit_feats, self.latents,
                self.t_values, self.target_ids, self.target_mask, self.v_target)

    def fingerprint(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for a in self.arrays())


def interpolate_latents(noise: np.ndarray, sample: np.ndarray, t: float):
    """Straight-line path x_t = (1-t) noise + t sample with velocity target
    sample - noise. t must lie strictly inside (0, 1)."""
    if not 0.0 < float(t) < 1.0:
        raise ValueError(f"interpolation time must be in (0, 1), got {t}")
    x_t = (1.0 - t) * noise + t * sample
    return x_t, sample - noise


class SyntheticWorld:
    """Fixed task structure for one (mixture, seed) pair."""

    def __init__(self, mixture: MixtureConfig, seed: int):
        self.mixture = mixture
        self.seed = seed
        rng = Rng(mix_key(seed, "world"))
        v = mixture.vocab_size
        logits = rng.normals((v, v)) * 1.5
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        self.bigram = probs / probs.sum(axis=1, keepdims=True)
        self.bigram_cum = np.cumsum(self.bigram, axis=1)
        dz = mixture.d_factors
        self.vit_map = rng.normals((dz, mixture.mmu_vit_len * mixture.d_vit)) / np.sqrt(dz)
        n_answers = mixture.mmu_text_len - 1
        self.answer_map = rng.normals((n_answers, dz, v))
        self.prompt_embed = rng.normals((v, dz))
        self.latent_map = rng.normals((mixture.latent_len * mixture.d_latent, dz)) / np.sqrt(dz)
        self.mmu_marker = 0

    # ------------------------------------------------------------------
    def _chain(self, rng: Rng, length: int) -> np.ndarray:
        tokens = np.empty(length, dtype=np.int64)
        tokens[0] = rng.randint(self.mixture.vocab_size)
        for i in range(1, length):
            u = rng.uniform()
            tokens[i] = int(np.searchsorted(self.bigram_cum[tokens[i - 1]], u, side="right"))
        return np.minimum(tokens, self.mixture.vocab_size - 1)

    def bigram_entropy(self) -> float:
        p = np.clip(self.bigram, 1e-300, None)
        rows = -(p * np.log(p)).sum(axis=1)
        return float(rows.mean())

    def clean_latents(self, prompt: np.ndarray) -> np.ndarray:
        pooled = self.prompt_embed[prompt].mean(axis=0) * np.sqrt(prompt.shape[0])
        flat = self.latent_map @ pooled / np.sqrt(self.mixture.d_factors)
        return flat.reshape(self.mixture.latent_len, self.mixture.d_latent)

    def mmu_sample(self, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        z = rng.normals(self.mixture.d_factors)
        vit = (z @ self.vit_map).reshape(self.mixture.mmu_vit_len, self.mixture.d_vit)
        answers = np.argmax(z @ self.answer_map, axis=1).astype(np.int64)
        return vit, answers

    # ------------------------------------------------------------------
    def _blank(self, task: Task, n_seqs: int, seq_len: int) -> TokenSheet:
        t = n_seqs * seq_len
        m = self.mixture
        return TokenSheet(
            task=task, n_seqs=n_seqs, seq_len=seq_len,
            tags=np.zeros(t, dtype=np.int64),
            token_ids=np.zeros(t, dtype=np.int64),
            vit_feats=np.zeros((t, m.d_vit)),
            latents=np.zeros((t, m.d_latent)),
            t_values=np.zeros(t),
            target_ids=np.zeros(t, dtype=np.int64),
            target_mask=np.zeros(t, dtype=bool),
            v_target=np.zeros((t, m.d_latent)))

    def _fill_lm(self, sheet: TokenSheet, rng: Rng, base: int, length: int) -> None:
        tokens = self._chain(rng, length)
        sl = slice(base, base + length)
        sheet.tags[sl] = int(ModalityTag.TEXT)
        sheet.token_ids[sl] = tokens
        sheet.target_ids[base:base + length - 1] = tokens[1:]
        sheet.target_mask[base:base + length - 1] = True

    def _fill_mmu(self, sheet: TokenSheet, rng: Rng, base: int) -> None:
        m = self.mixture
        vit, answers = self.mmu_sample(rng)
        vit_end = base + m.mmu_vit_len
        sheet.tags[base:vit_end] = int(ModalityTag.VIT)
        sheet.vit_feats[base:vit_end] = vit
        text = np.concatenate([[self.mmu_marker], answers])
        text_end = vit_end + m.mmu_text_len
        sheet.tags[vit_end:text_end] = int(ModalityTag.TEXT)
        sheet.token_ids[vit_end:text_end] = text
        sheet.target_ids[vit_end:text_end - 1] = answers
        sheet.target_mask[vit_end:text_end - 1] = True

    def _fill_t2i(self, sheet: TokenSheet, rng: Rng, base: int, prompt_len: int) -> None:
        m = self.mixture
        prompt = self._chain(rng, prompt_len)
        clean = self.clean_latents(prompt)
        noise = rng.normals((m.latent_len, m.d_latent))
        t = rng.open_unit()
        x_t, v_star = interpolate_latents(noise, clean, t)
        p_end = base + prompt_len
        sheet.tags[base:p_end] = int(ModalityTag.TEXT)
        sheet.token_ids[base:p_end] = prompt
        sheet.target_ids[base:p_end - 1] = prompt[1:]
        sheet.target_mask[base:p_end - 1] = True
        l_end = p_end + m.latent_len
        sheet.tags[p_end:l_end] = int(ModalityTag.VAE)
        sheet.latents[p_end:l_end] = x_t
        sheet.t_values[p_end:l_end] = t
        sheet.v_target[p_end:l_end] = v_star

    def seq_len_for(self, task: Task) -> int:
        m = self.mixture
        return {Task.LM: m.lm_len,
                Task.MMU: m.mmu_vit_len + m.mmu_text_len,
                Task.T2I: m.t2i_prompt_len + m.latent_len,
                Task.T2I_LONG: m.t2i_long_prompt_len + m.latent_len}[task]

    def _build(self, task: Task, rng: Rng, n_seqs: int) -> TokenSheet:
        m = self.mixture
        seq_len = self.seq_len_for(task)
        sheet = self._blank(task, n_seqs, seq_len)
        for s in range(n_seqs):
            base = s * seq_len
            if task == Task.LM:
                self._fill_lm(sheet, rng, base, m.lm_len)
            elif task == Task.MMU:
                self._fill_mmu(sheet, rng, base)
            elif task == Task.T2I:
                self._fill_t2i(sheet, rng, base, m.t2i_prompt_len)
            else:
                self._fill_t2i(sheet, rng, base, m.t2i_long_prompt_len)
        return sheet

    def batch(self, task: Task, step: int, n_seqs: int | None = None) -> TokenSheet:
        rng = Rng(mix_key(self.seed, "batch", task.value, step))
        return self._build(task, rng, n_seqs or self.mixture.batch_seqs)

    def probe_batch(self, task: Task, index: int, n_seqs: int | None = None) -> TokenSheet:
        rng = Rng(mix_key(self.seed, "probe", task.value, index))
        return self._build(task, rng, n_seqs or self.mixture.batch_seqs)

    def eval_batches(self, n_batches: int = 2, n_seqs: int = 8) -> list[TokenSheet]:
        """Fixed held-out understanding-task sheets (lm and mmu alternating)."""
        sheets = []
        for i in range(n_batches):
            for task in (Task.LM, Task.MMU):
                rng = Rng(mix_key(self.seed, "eval", task.value, i))
                sheets.append(self._build(task, rng, n_seqs))
        return sheets


_worlds: dict[tuple, SyntheticWorld] = {}


def get_world(mixture: MixtureConfig, seed: int) -> SyntheticWorld:
    key = (mixture.key(), seed)
    if key not in _worlds:
        _worlds[key] = SyntheticWorld(mixture, seed)
    return _worlds[key]


def generate_batch(mixture: MixtureConfig, task: Task, seed: int, step: int) -> TokenSheet:
    """Batch for one training step; bitwise-deterministic in its arguments."""
    return get_world(mixture, seed).batch(task, step)
