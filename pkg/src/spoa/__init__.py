"""Reinforcement-learning single-image super-resolution.

An actor network carries an interpolated low-resolution state to a
super-resolved one through residual-block actions, while a shared-weight
Siamese policy network scores how close the arrived state is to the goal.
Training maximizes the negative-MSE terminal reward with separate actor and
policy updates plus a combined step, batched over a per-episode replay
buffer.
"""

from .autodiff import (NonFiniteError, ShapeError, Var, backward, conv2d, inner_product,
                       leaky_relu, log_sigmoid, sigmoid)
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .networks import (ActorTrace, NetworkConfig, ParameterSet, actor_apply, actor_forward,
                       feature_extract, init_parameters, policy_prob, residual_block,
                       siamese_score)
from .optim import AdamState, adam_step
from .rl import (EpisodeRecord, ReplayBuffer, StatePair, TrainConfig, TrainingDivergedError,
                 TrainResult, actor_update, policy_update, reward, run_episode, spoa_update,
                 train, within_epsilon)
from .data import (ImageBuffer, augment, bicubic_resample, from_tensor, load_dataset,
                   load_image, make_state_pair, save_image, synth_dataset, to_tensor,
                   write_synth_dataset)
from .metrics import MetricReport, evaluate_split, psnr, sam, sre, ssim

__version__ = "0.1.0"

__all__ = [
    "ActorTrace", "AdamState", "CheckpointError", "EpisodeRecord", "ImageBuffer",
    "MetricReport", "NetworkConfig", "NonFiniteError", "ParameterSet", "ReplayBuffer",
    "ShapeError", "StatePair", "TrainConfig", "TrainResult", "TrainingDivergedError",
    "Var", "actor_apply", "actor_forward", "actor_update", "adam_step", "augment",
    "backward", "bicubic_resample", "conv2d", "evaluate_split", "feature_extract",
    "from_tensor", "init_parameters", "inner_product", "leaky_relu", "load_dataset",
    "load_image", "load_tensors", "log_sigmoid", "make_state_pair", "policy_prob",
    "policy_update", "psnr", "residual_block", "reward", "run_episode", "sam",
    "save_image", "save_tensors", "siamese_score", "sigmoid", "spoa_update", "sre",
    "ssim", "synth_dataset", "to_tensor", "train", "within_epsilon", "write_synth_dataset",
]
