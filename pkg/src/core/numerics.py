# numerics.py
"""
Differentiable kernels shared by the decoder, the losses and the diagnostics.

Tensors are plain torch tensors; gradients come from torch autograd. This module
only adds the contracts the rest of the pipeline relies on (masked rows forced to
exactly zero, loud failure on non-finite values) and a finite-difference checker
for those gradients.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import GradientCheckError, NumericsError

logger = logging.getLogger(__name__)

# -inf stand-ins; real infinities would turn 0 * -inf into NaN during backprop.
_SENTINELS = {
    torch.float16: -1e4,
    torch.bfloat16: -1e9,
    torch.float32: -1e9,
    torch.float64: -1e18,
}
# Anything at or below this is treated as a blocked entry, whatever dtype built the mask.
_BLOCKED_AT = -5e8


def mask_sentinel(dtype):
    return _SENTINELS.get(dtype, -1e9)


def check_finite(tensor, what):
    """Raises NumericsError when tensor holds a NaN or an infinity."""
    if not torch.isfinite(tensor).all():
        bad = torch.nonzero(~torch.isfinite(tensor))[0].tolist()
        raise NumericsError(f"non-finite value in {what} at index {bad}")
    return tensor


def blocked_entries(additive_mask):
    """Boolean view of an additive {0, -inf} mask (sentinels count as -inf)."""
    return additive_mask <= _BLOCKED_AT


def masked_softmax(logits, additive_mask):
    """
    Softmax over the last axis where mask entries of -inf (or a sentinel) are excluded.

    Excluded positions come out as exactly 0 and every admissible row sums to 1.

    :param logits: [..., rows, cols] scores.
    :param additive_mask: broadcastable to logits, entries in {0, -inf}.
    """
    check_finite(logits, "attention logits")
    blocked = blocked_entries(additive_mask).expand_as(logits)
    empty = blocked.all(dim=-1)
    if empty.any():
        row = torch.nonzero(empty)[0].tolist()
        raise NumericsError(f"empty attention row {row}")
    scores = logits.masked_fill(blocked, mask_sentinel(logits.dtype))
    # torch.softmax subtracts the row max before exponentiating.
    probs = torch.softmax(scores, dim=-1)
    return probs.masked_fill(blocked, 0.0)


def cosine_distance(a, b):
    """
    1 - cos(a, b) along the last axis, in [0, 2].

    b is usually a teacher feature and carries no gradient.
    """
    aa = (a * a).sum(dim=-1)
    bb = (b * b).sum(dim=-1)
    if bool((aa == 0).any()) or bool((bb == 0).any()):
        raise NumericsError("degenerate feature vector")
    # sqrt(aa * bb) rather than |a| * |b| so that a == b gives a cosine of exactly 1.
    cosine = (a * b).sum(dim=-1) / torch.sqrt(aa * bb)
    return torch.clamp(1.0 - cosine, 0.0, 2.0)


def l2_normalize(x, eps=1e-12):
    return F.normalize(x, p=2.0, dim=-1, eps=eps)


def rms_norm(x, weight, eps=1e-6):
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * weight


def gelu(x):
    return F.gelu(x, approximate="tanh")


def matmul(a, b):
    return torch.matmul(a, b)


def embed(ids, table):
    return F.embedding(ids, table)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood over every leading position."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


def mean(x):
    return x.mean()


@dataclass
class GradReport:
    """Outcome of gradient_check.

    max_rel_error only counts elements whose absolute error is above atol; an
    element whose gradient is ~0 on both sides cannot fail on relative error alone.
    """
    max_rel_error: dict = field(default_factory=dict)
    max_abs_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    passed: bool = True
    tolerance: float = 1e-4
    atol: float = 1e-6
    epsilon: float = 1e-5

    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradient_check(fn, inputs, epsilon=1e-5, tolerance=1e-4, atol=1e-6, max_coords=None, seed=0):
    """
    Compares autograd gradients of a scalar function with central differences.

    Everything runs in float64. An element passes when its relative error is within
    tolerance or its absolute error is within atol.

    :param fn: Callable taking a dict name -> tensor and returning a scalar tensor.
    :param inputs: Dict name -> tensor at which to check.
    :param epsilon: Finite-difference step.
    :param tolerance: Relative error bound.
    :param atol: Absolute error floor.
    :param max_coords: If set, at most this many coordinates per input are probed
                       (drawn once from seed).
    """
    work = {
        name: tensor.detach().to(torch.float64).clone().requires_grad_(True)
        for name, tensor in inputs.items()
    }
    value = fn(work)
    if not torch.isfinite(value):
        raise NumericsError(f"non-finite objective at the check point: {value.item()}")
    names = list(work)
    grads = torch.autograd.grad(value, [work[n] for n in names], allow_unused=True)
    analytic = {
        name: (g if g is not None else torch.zeros_like(work[name])).detach().reshape(-1).numpy()
        for name, g in zip(names, grads)
    }

    rng = np.random.default_rng(seed)
    report = GradReport(tolerance=tolerance, atol=atol, epsilon=epsilon)
    with torch.no_grad():
        for name in names:
            flat = work[name].view(-1)
            count = flat.numel()
            coords = np.arange(count)
            if max_coords is not None and count > max_coords:
                coords = np.sort(rng.choice(count, size=max_coords, replace=False))
            numeric = np.zeros(len(coords))
            for n, c in enumerate(coords.tolist()):
                original = flat[c].item()
                flat[c] = original + epsilon
                f_plus = fn(work).item()
                flat[c] = original - epsilon
                f_minus = fn(work).item()
                flat[c] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise GradientCheckError(name, np.unravel_index(c, tuple(work[name].shape)))
                numeric[n] = (f_plus - f_minus) / (2.0 * epsilon)

            g_a = analytic[name][coords]
            abs_err = np.abs(g_a - numeric)
            rel_err = relative_error(g_a, numeric)
            significant = abs_err > atol
            report.max_abs_error[name] = float(abs_err.max(initial=0.0))
            report.max_rel_error[name] = float(rel_err[significant].max(initial=0.0))
            report.checked[name] = int(len(coords))
            if report.max_rel_error[name] > tolerance:
                report.passed = False
                logger.debug("gradient mismatch for %s: rel %.3e", name, report.max_rel_error[name])
    return report
