"""moebridge: a desk-scale sparse mixture-of-experts engine for studying
multimodal task interference, expert grouping, and gradient shielding."""

from .autograd import Tensor, backward, no_grad
from .config import RunConfig, load_config
from .data import MixtureConfig, SyntheticWorld, Task, generate_batch, get_world
from .grouping import (ActivationProfile, ModalityTag, PartitionPlan, PartitionSpec,
                       imbalance_ratio, partition_experts, profile_activations,
                       selection_std, slice_router)
from .losses import LossWeights, discrete_loss, flow_matching_loss, total_loss
from .model import (ArchitectureMode, Model, ModelConfig, ShieldState, build_model,
                    probe_shared_only)
from .moe import (ExpertFFN, MoELayerConfig, Router, RoutingDecision, apply_capacity,
                  aux_loss, capacity_rate, moe_forward, route)
from .train import run_compare, run_training

__version__ = "0.1.0"
