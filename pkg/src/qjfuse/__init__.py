"""Quantum-inspired multimodal fusion with quantum-jump dynamics, on a numpy autodiff core."""

from .autodiff import ComplexTensor, Tape, Tensor, grad_check
from .model import ModelConfig, QJFusionModel, Variant
from .qjump import Convention, JumpGenerator, TrajectoryConfig, evolve_trajectory
from .training import RunConfig, train

__version__ = "0.1.0"

__all__ = ["ComplexTensor", "Tape", "Tensor", "grad_check", "ModelConfig", "QJFusionModel", "Variant",
           "Convention", "JumpGenerator", "TrajectoryConfig", "evolve_trajectory", "RunConfig", "train"]
