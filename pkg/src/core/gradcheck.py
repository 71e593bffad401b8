# gradcheck.py
"""Finite-difference checks of every loss and kernel on a micro configuration, in float64."""
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch.func import functional_call

from . import numerics, seeding
from .losses import loss_ar, loss_mim, loss_step, loss_view
from .model import ModelConfig, StarDecoder, build_key_mask, init_weights
from .trainer import Batch, TrainConfig, compute_losses, new_train_state

logger = logging.getLogger(__name__)

EPSILON = 1e-4
COMPONENT_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
# Unit-scale weights keep the projector norms away from their eps regime, where
# central differences at EPSILON are dominated by curvature.
MICRO_INIT_STD = 0.5


@dataclass
class CheckResult:
    name: str
    report: numerics.GradReport

    @property
    def passed(self):
        return self.report.passed

    def row(self):
        return {
            "check": self.name,
            "max_rel_error": self.report.worst(),
            "max_abs_error": max(self.report.max_abs_error.values(), default=0.0),
            "coords": sum(self.report.checked.values()),
            "tolerance": self.report.tolerance,
            "passed": self.passed,
        }


def micro_config():
    """L=2, D=16, T=8 decoder small enough to difference every loss through."""
    return ModelConfig(layers=2, width=16, heads=2, vocab_size=16, seq_len=8, num_classes=3,
                       tap_depth=1, mask_ratio=0.25, mlp_ratio=2)


def micro_train_config():
    return TrainConfig(batch_size=2, views=2, k_steps=2, warmup_steps=0, cfg_dropout=0.0,
                       log_timing=False, progress=False)


class _TotalLoss(nn.Module):
    """Wraps compute_losses so functional_call can swap the student's parameters."""

    def __init__(self, state, batch, step):
        super().__init__()
        self.student = state.student
        self.state = state
        self.batch = batch
        self.step = step

    def forward(self):
        return compute_losses(self.state, self.batch, self.step).total


def _component_checks(config, generator):
    b, m, t, k, d, v = 2, 2, config.seq_len, 2, config.width, config.vocab_size
    targets = torch.randint(0, v, (b * m, t), generator=generator)
    teacher_h = torch.randn(b * m, t, d, generator=generator, dtype=torch.float64)
    h_t = torch.randn(b, m, k, d, generator=generator, dtype=torch.float64)
    key_mask = build_key_mask(t, 0.5, 11).additive(torch.float64)

    def rand(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64)

    return [
        ("l_ar", lambda x: loss_ar(x["logits"], targets), {"logits": rand(b * m, t, v)}),
        ("l_mim", lambda x: loss_mim(x["student_h"], teacher_h), {"student_h": rand(b * m, t, d)}),
        ("l_step", lambda x: loss_step(x["z_s"], h_t), {"z_s": rand(b, m, k, d)}),
        ("l_view", lambda x: loss_view(x["z_s"], h_t), {"z_s": rand(b, m, k, d)}),
        ("masked_softmax", lambda x: (numerics.masked_softmax(x["scores"], key_mask) * x["probe"]).sum(),
         {"scores": rand(t, t), "probe": rand(t, t)}),
        ("rms_norm", lambda x: (numerics.rms_norm(x["x"], x["weight"]) ** 2).sum(),
         {"x": rand(4, d), "weight": rand(d)}),
        ("gelu", lambda x: numerics.gelu(x["x"]).sum(), {"x": rand(4, d)}),
    ]


def end_to_end_inputs(seed=0):
    """Micro-config student, train state and batch for the l_total check."""
    config = micro_config()
    student = init_weights(StarDecoder(config), seed, std=MICRO_INIT_STD).double()
    state = new_train_state(student, config, micro_train_config(), codebook=None, patch_side=None)
    generator = seeding.torch_generator(seed, "gradcheck", "batch")
    tokens = torch.randint(0, config.vocab_size, (2, 2, config.seq_len), generator=generator)
    labels = torch.tensor([0, 1])
    return state, Batch(tokens, labels.clone(), labels)


def run_suite(seed=0, max_coords=24):
    """
    :param max_coords: Coordinates probed per parameter tensor in the end-to-end check.
    :return: list of CheckResult, components first
    """
    config = micro_config()
    generator = seeding.torch_generator(seed, "gradcheck", "inputs")
    results = []
    for name, fn, inputs in _component_checks(config, generator):
        report = numerics.gradient_check(fn, inputs, epsilon=EPSILON, tolerance=COMPONENT_TOLERANCE)
        results.append(CheckResult(name, report))

    state, batch = end_to_end_inputs(seed)
    wrapper = _TotalLoss(state, batch, step=1)
    params = dict(state.student.named_parameters())

    def total(x):
        return functional_call(wrapper, {f"student.{n}": p for n, p in x.items()}, ())

    report = numerics.gradient_check(total, params, epsilon=EPSILON, tolerance=END_TO_END_TOLERANCE,
                                     max_coords=max_coords, seed=seed)
    results.append(CheckResult("l_total", report))
    for result in results:
        logger.info("gradient check %-15s rel %.2e  %s", result.name, result.report.worst(),
                    "ok" if result.passed else "FAILED")
    return results
