"""Concept bottleneck models with entropy-gated residual embeddings (MixCEM),
baselines, synthetic concept tasks and an intervention-study harness."""

from .datagen import TaskSpec, generate_task, inject_salt_pepper
from .models import ForwardOptions, InterventionMask, ModelConfig, forward, init_model
from .training import TrainConfig, train

__all__ = ["TaskSpec", "generate_task", "inject_salt_pepper", "ModelConfig", "init_model", "forward",
           "ForwardOptions", "InterventionMask", "TrainConfig", "train"]
__version__ = "0.1.0"
