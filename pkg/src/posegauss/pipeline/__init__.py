"""End-to-end model: encoders, fusion, depth refinement, decoder, lifting and rendering."""

from .config import ModelConfig, micro_config
from .experiments import (
    LOSS_SWEEP_ROWS,
    POSE_ARMS,
    evaluate,
    fusion_sweep,
    loss_sweep,
    oracle_predictor,
    overfit_probe,
    pose_sweep,
    smoothed_curve,
    temporal_ablation,
    train_on_frames,
)
from .model import ForwardOutput, ModelWeights, SourceBatch, forward, init_weights, make_tps_states
from .train import (
    CheckpointError,
    NonFiniteLoss,
    Sample,
    TrainState,
    compute_losses,
    load_checkpoint,
    loss_and_grads,
    make_sample,
    save_checkpoint,
    train,
    train_step,
)

__all__ = [
    "LOSS_SWEEP_ROWS",
    "POSE_ARMS",
    "CheckpointError",
    "ForwardOutput",
    "ModelConfig",
    "ModelWeights",
    "NonFiniteLoss",
    "Sample",
    "SourceBatch",
    "TrainState",
    "compute_losses",
    "evaluate",
    "forward",
    "fusion_sweep",
    "init_weights",
    "load_checkpoint",
    "loss_and_grads",
    "loss_sweep",
    "make_sample",
    "make_tps_states",
    "micro_config",
    "oracle_predictor",
    "overfit_probe",
    "pose_sweep",
    "save_checkpoint",
    "smoothed_curve",
    "temporal_ablation",
    "train",
    "train_on_frames",
    "train_step",
]
