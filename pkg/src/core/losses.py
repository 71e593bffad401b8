# losses.py
"""
Token prediction, masked-feature alignment and the two contrastive losses.

Contrastive similarities are dot products of L2-normalized features divided by a
temperature; negatives are the other images of the batch at the same view and
position index.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import numerics
from .errors import NonFiniteLossError, UsageError

logger = logging.getLogger(__name__)

COMPONENTS = ("l_ar", "l_mim", "l_step", "l_view")


@dataclass
class LossBundle:
    l_ar: torch.Tensor
    l_mim: torch.Tensor
    l_step: torch.Tensor
    l_view: torch.Tensor
    total: torch.Tensor
    alpha: float
    beta: float

    def scalars(self):
        """Unweighted components and the total as Python floats."""
        return {name: float(getattr(self, name).detach()) for name in COMPONENTS + ("total",)}


@dataclass
class PositionDraw:
    indices: tuple
    k: int


def loss_ar(logits, targets):
    """Mean over batch and positions of -log softmax(logits)[target]."""
    vocab = logits.shape[-1]
    if targets.numel() and (int(targets.max()) >= vocab or int(targets.min()) < 0):
        raise UsageError(f"target token outside the vocabulary of {vocab}")
    return numerics.cross_entropy(logits, targets)


def loss_mim(student_h, teacher_h):
    """Mean cosine distance between masked-student and unmasked-teacher last-layer states."""
    return numerics.cosine_distance(student_h, teacher_h.detach()).mean()


def sample_positions(k, length, seed):
    """K distinct positions of [0, length), uniform without replacement."""
    if k < 2:
        raise UsageError(f"K={k}: the contrastive losses need at least 2 positions")
    if k > length:
        raise UsageError(f"K={k} exceeds the sequence length {length}")
    rng = np.random.default_rng(seed)
    indices = rng.choice(length, size=k, replace=False)
    return PositionDraw(tuple(int(i) for i in indices), int(k))


def _pair_terms(similarity, literal):
    """
    -log of the positive's share among the batch candidates, or the printed log-free
    ratio when literal is set.

    similarity: [..., B (anchor image), B (candidate image)]
    """
    if literal:
        ratio = torch.softmax(similarity, dim=-1)
        return -torch.diagonal(ratio, dim1=-2, dim2=-1)
    log_share = torch.log_softmax(similarity, dim=-1)
    return -torch.diagonal(log_share, dim1=-2, dim2=-1)


def loss_step(z_s, h_t, temperature=0.2, literal=False):
    """
    Inter-step InfoNCE.

    Anchor: student projection at (b, m, i). Positive: teacher feature at (b, m, j),
    j != i. Candidates: teacher features at (v, m, j) for every image v in the batch.

    :param z_s: [B, M, K, D] projected student features.
    :param h_t: [B, M, K, D] teacher features (no gradient).
    """
    batch, views, k, _ = z_s.shape
    if k < 2:
        raise UsageError("no positive pair: inter-step loss needs K >= 2")
    anchors = numerics.l2_normalize(z_s)
    targets = numerics.l2_normalize(h_t.detach())
    # sim[m, i, j, b, v] = <anchor(b, m, i), target(v, m, j)> / tau
    similarity = torch.einsum("bmid,vmjd->mijbv", anchors, targets) / temperature
    terms = _pair_terms(similarity, literal)  # [M, K, K, B]
    off_diagonal = ~torch.eye(k, dtype=torch.bool)
    return terms[:, off_diagonal, :].mean()


def loss_view(z_s, h_t, temperature=0.2, literal=False):
    """
    Inter-view InfoNCE.

    Anchor: student projection at (b, i, k). Positive: teacher feature at (b, j, k),
    view j != i. Candidates: teacher features at (v, j, k) for every image v.
    """
    batch, views, k, _ = z_s.shape
    if views < 2:
        raise UsageError("inter-view loss needs at least 2 views")
    anchors = numerics.l2_normalize(z_s)
    targets = numerics.l2_normalize(h_t.detach())
    # sim[k, i, j, b, v] = <anchor(b, i, k), target(v, j, k)> / tau
    similarity = torch.einsum("bikd,vjkd->kijbv", anchors, targets) / temperature
    terms = _pair_terms(similarity, literal)  # [K, M, M, B]
    off_diagonal = ~torch.eye(views, dtype=torch.bool)
    return terms[:, off_diagonal, :].mean()


def loss_total(l_ar, l_mim, l_step, l_view, alpha, beta):
    """
    total = l_ar + alpha * l_mim + (beta / 2) * (l_step + l_view).

    Components are kept unweighted in the bundle for logging.
    """
    components = {"l_ar": l_ar, "l_mim": l_mim, "l_step": l_step, "l_view": l_view}
    for name, value in components.items():
        value = value.detach()
        if not bool(torch.isfinite(value)):
            raise NonFiniteLossError(name, float(value))
    total = l_ar + alpha * l_mim + (beta / 2.0) * (l_step + l_view)
    return LossBundle(l_ar, l_mim, l_step, l_view, total, float(alpha), float(beta))
