"""Self-ensembling teacher: EMA maintenance, input perturbations and the
consistency warm-up ramp."""

import copy
import math
from typing import Optional

import torch
import torch.nn as nn

from src.errors import ParameterError, StructureError


class TeacherState:
    """EMA teacher of a student network.

    The teacher is never touched by gradients; parameters and floating-point
    buffers (DSBN running statistics included) follow the student by EMA.
    """

    def __init__(self, model: nn.Module, decay: float = 0.99, iteration: int = 0):
        if not 0.0 <= decay <= 1.0:
            raise ParameterError(f"EMA decay must lie in [0, 1], got {decay}")
        self.model = model
        self.decay = decay
        self.iteration = iteration
        self.model.requires_grad_(False)
        self.model.eval()

    @classmethod
    def from_student(cls, student: nn.Module, decay: float = 0.99) -> "TeacherState":
        """Teacher initialized as an exact copy of the student."""
        return cls(copy.deepcopy(student), decay)

    def predict(self, x: torch.Tensor, domain) -> torch.Tensor:
        """Eval-mode probabilities without gradient."""
        with torch.no_grad():
            return self.model.segment(x, domain)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: nn.Module, decay: Optional[float] = None) -> TeacherState:
    """teacher <- decay * teacher + (1 - decay) * student, for every parameter
    and floating-point buffer; increments the iteration counter."""
    decay = teacher.decay if decay is None else decay
    if not 0.0 <= decay <= 1.0:
        raise ParameterError(f"EMA decay must lie in [0, 1], got {decay}")

    teacher_state = teacher.model.state_dict()
    student_state = student.state_dict()
    if teacher_state.keys() != student_state.keys():
        missing = sorted(set(teacher_state) ^ set(student_state))
        raise StructureError(f"teacher and student parameters differ: {missing[:5]}")

    for key, t in teacher_state.items():
        s = student_state[key]
        if t.shape != s.shape:
            raise StructureError(f"{key}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        if t.is_floating_point():
            # lerp keeps teacher == student a fixed point and decay = 0 an exact copy
            t.lerp_(s, 1.0 - decay)
        else:
            t.copy_(s)
    teacher.iteration += 1
    return teacher


def perturb(x: torch.Tensor, generator: Optional[torch.Generator], noise_sigma: float) -> torch.Tensor:
    """Add zero-mean Gaussian noise and clip back to [0, 1]."""
    if noise_sigma < 0:
        raise ParameterError(f"noise sigma must be non-negative, got {noise_sigma}")
    if noise_sigma == 0:
        return x.clone()
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return (x + noise_sigma * noise).clamp(0.0, 1.0)


def consistency_weight(k: int, k_max: int, scale: float = 0.1, sharpness: float = 5.0) -> float:
    """Gaussian warm-up: scale * exp(-sharpness * (1 - k/k_max)^2).

    Iterations beyond k_max are clamped to k_max.
    """
    if k_max <= 0:
        raise ParameterError(f"k_max must be positive, got {k_max}")
    if k < 0:
        raise ParameterError(f"iteration must be non-negative, got {k}")
    phase = 1.0 - min(k, k_max) / k_max
    return scale * math.exp(-sharpness * phase * phase)
