# teacher.py
"""EMA teacher: a frozen copy of the decoder that trails the student's weights."""
import copy
import logging

import torch

from .errors import ShapeMismatchError, UsageError

logger = logging.getLogger(__name__)


class TeacherState:
    def __init__(self, student, decay):
        """
        Starts the teacher as an exact copy of the student.

        :param student: StarDecoder whose weights seed theta'.
        :param decay: EMA decay in [0, 1], constant for the run.
        """
        if not 0.0 <= decay <= 1.0:
            raise UsageError(f"EMA decay {decay} outside [0, 1]")
        self.params = copy.deepcopy(student)
        self.params.requires_grad_(False)
        self.params.eval()
        self.decay = float(decay)
        self.steps_applied = 0

    @property
    def model(self):
        return self.params


@torch.no_grad()
def ema_update(teacher, student):
    """theta' <- decay * theta' + (1 - decay) * theta, elementwise; returns the teacher."""
    student_params = dict(student.named_parameters())
    teacher_params = dict(teacher.params.named_parameters())
    if student_params.keys() != teacher_params.keys():
        missing = sorted(set(student_params) ^ set(teacher_params))
        raise ShapeMismatchError(f"teacher and student parameter names differ: {missing[:3]}")
    for name, target in teacher_params.items():
        source = student_params[name]
        if source.shape != target.shape:
            raise ShapeMismatchError(
                f"parameter {name}: teacher {tuple(target.shape)} vs student {tuple(source.shape)}")
    for name, target in teacher_params.items():
        target.mul_(teacher.decay).add_(student_params[name].detach(), alpha=1.0 - teacher.decay)
    teacher.steps_applied += 1
    return teacher


@torch.no_grad()
def teacher_forward(teacher, tokens, conditions, trace_level="logits_only"):
    """Unmasked forward of theta'; everything it returns is a constant for autograd."""
    return teacher.params(tokens, conditions, key_masks=None, trace_level=trace_level)
