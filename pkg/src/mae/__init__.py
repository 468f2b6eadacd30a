"""Mixture of attentive experts: multi-head attention as a gated mixture of
head-dropped experts, trained by block coordinate descent."""

from mae.attention import ExpertId, MaeLayerParams, enumerate_experts, mae_forward
from mae.kernels import BACKEND
from mae.models import MaeTransformer, ModelConfig, build_model
from mae.tasks import TaskSpec, generate_task
from mae.trainer import Trainer, TrainSchedule

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ExpertId",
    "MaeLayerParams",
    "MaeTransformer",
    "ModelConfig",
    "TaskSpec",
    "TrainSchedule",
    "Trainer",
    "build_model",
    "enumerate_experts",
    "generate_task",
    "mae_forward",
]
