"""Desk-scale spiking network training lab with spike-aware data pruning."""

from .data import DatasetHandle, gen_synthetic, gen_synthetic_split
from .pruning import (EpochPlan, ProbabilityAssignment, PruneConfig, ScoreTable,
                      loss_score, loss_weights, sample_mask, schedule_ratio,
                      smooth_probabilities, solve_probabilities,
                      spike_aware_score)
from .snn import (BackwardTrace, ForwardTrace, LayerSpec, LossOutput,
                  NeuronConfig, Network, backward_bptt, forward, lif_step,
                  patch_count, surrogate_grad)
from .training import OptimizerState, TrainState, cosine_lr, run_training, sgd_step

__all__ = [
    "BackwardTrace", "DatasetHandle", "EpochPlan", "ForwardTrace", "LayerSpec",
    "LossOutput", "NeuronConfig", "Network", "OptimizerState",
    "ProbabilityAssignment", "PruneConfig", "ScoreTable", "TrainState",
    "backward_bptt", "cosine_lr", "forward", "gen_synthetic",
    "gen_synthetic_split", "lif_step", "loss_score", "loss_weights",
    "patch_count", "run_training", "sample_mask", "schedule_ratio", "sgd_step",
    "smooth_probabilities", "solve_probabilities", "spike_aware_score",
    "surrogate_grad",
]

__version__ = "0.1.0"
