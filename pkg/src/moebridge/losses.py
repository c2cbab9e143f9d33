"""Training objectives: masked next-token cross-entropy, the velocity
regression loss for latent generation, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import MixtureConfig, Task, TokenSheet, interpolate_latents
from .grouping import ModalityTag


@dataclass
class LossWeights:
    lambda_disc: float = 1.0
    lambda_aux: float = 0.01
    lambda_img: float = 1.0

    def __post_init__(self):
        if min(self.lambda_disc, self.lambda_aux, self.lambda_img) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossParts:
    discrete: Tensor
    aux: Tensor
    image: Tensor


def discrete_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over the masked positions."""
    rows = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if rows.size == 0:
        return Tensor(0.0)
    return ag.cross_entropy(ag.take_rows(logits, rows), np.asarray(targets)[rows])


def flow_matching_loss(model, vae_sample: np.ndarray, t: float, noise: np.ndarray,
                       prompt_ids: np.ndarray | None = None) -> Tensor:
    """Velocity-matching loss for one latent sequence.

    The latent tokens are noised along the straight path between noise and
    sample at time t, the model predicts the velocity at each latent
    position, and the loss is the MSE against sample - noise.
    """
    vae_sample = np.asarray(vae_sample, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != vae_sample.shape:
        raise ValueError(f"noise shape {noise.shape} != sample shape {vae_sample.shape}")
    x_t, v_star = interpolate_latents(noise, vae_sample, t)
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64) if prompt_ids is not None \
        else np.zeros(0, dtype=np.int64)
    n_latent, d_latent = vae_sample.shape
    seq_len = prompt_ids.shape[0] + n_latent
    sheet = TokenSheet(
        task=Task.T2I, n_seqs=1, seq_len=seq_len,
        tags=np.concatenate([np.full(prompt_ids.shape[0], int(ModalityTag.TEXT)),
                             np.full(n_latent, int(ModalityTag.VAE))]),
        token_ids=np.concatenate([prompt_ids, np.zeros(n_latent, dtype=np.int64)]),
        vit_feats=np.zeros((seq_len, model.config.d_vit)),
        latents=np.concatenate([np.zeros((prompt_ids.shape[0], d_latent)), x_t]),
        t_values=np.concatenate([np.zeros(prompt_ids.shape[0]), np.full(n_latent, t)]),
        target_ids=np.zeros(seq_len, dtype=np.int64),
        target_mask=np.zeros(seq_len, dtype=bool),
        v_target=np.concatenate([np.zeros((prompt_ids.shape[0], d_latent)), v_star]))
    out = model.forward(sheet)
    return ag.mse(out.velocity, v_star)


def image_loss_from_forward(result, sheet: TokenSheet) -> Tensor:
    """Velocity MSE over a batch forward that already consumed noised latents."""
    if result.velocity is None:
        return Tensor(0.0)
    vae_rows = np.nonzero(sheet.tags == int(ModalityTag.VAE))[0]
    return ag.mse(result.velocity, sheet.v_target[vae_rows])


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    return ag.add(ag.add(ag.mul(parts.discrete, weights.lambda_disc),
                         ag.mul(parts.aux, weights.lambda_aux)),
                  ag.mul(parts.image, weights.lambda_img))
