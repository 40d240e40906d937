"""Synthetic scenes and a one-hidden-layer dense detector trained with hand-written gradients."""

from .scene import Scene, SceneConfig, generate_scene, InfeasibleSceneError
from .model import ModelConfig, LossWeights, ToyModel, TrainLoss, forward
from .train import training_step, gradient_check
from .experiment import REGIMES, ExperimentConfig, ExperimentReport, run_experiment

__all__ = [
    "Scene",
    "SceneConfig",
    "generate_scene",
    "InfeasibleSceneError",
    "ModelConfig",
    "LossWeights",
    "ToyModel",
    "TrainLoss",
    "forward",
    "training_step",
    "gradient_check",
    "REGIMES",
    "ExperimentConfig",
    "ExperimentReport",
    "run_experiment",
]
