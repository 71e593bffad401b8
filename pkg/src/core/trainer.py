# trainer.py
"""
One optimizer step of self-guided training, and the loop around it.

Per step: quantize every view, drop conditions for guidance, run the masked student
and the unmasked teacher on all views, compute the loss bundle, clip, AdamW, EMA.
Every random choice comes from a named stream keyed by (seed, stream, step, ...).
"""
import json
import logging
import math
import os
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch
from tqdm import tqdm

from . import seeding
from .data_toy import make_pairs, quantize
from .errors import NumericsError, UsageError
from .losses import loss_ar, loss_mim, loss_step, loss_total, loss_view, sample_positions
from .model import build_key_mask, tap
from .teacher import TeacherState, ema_update, teacher_forward

logger = logging.getLogger(__name__)

METRICS_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 16
    views: int = 2
    steps: int = 5000
    base_lr: float = 0.01  # per 256 images
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    k_steps: int = 4
    alpha: float = 1.0
    beta: float = 0.5
    temperature: float = 0.2
    ema_decay: float = 0.9999
    cfg_dropout: float = 0.1
    seed: int = 0
    use_mim: bool = True
    use_step: bool = True
    use_view: bool = True
    literal_ratio: bool = False
    ar_on_unmasked: bool = False
    augment: bool = True
    checkpoint_every: int = 500
    log_every: int = 50
    log_timing: bool = True
    progress: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("train.batch_size must be >= 1")
        if self.views < 2:
            raise UsageError("train.views must be >= 2: every image is trained as an augmented pair")
        for name in ("base_lr", "warmup_steps", "weight_decay", "grad_clip", "alpha", "beta", "ema_decay"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise UsageError("loss.temperature must be > 0")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise UsageError("train.cfg_dropout must be in [0, 1]")

    @property
    def contrastive(self):
        return self.beta > 0 and (self.use_step or self.use_view)

    @property
    def masked_alignment(self):
        return self.alpha > 0 and self.use_mim


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    l_ar: float
    l_mim: float
    l_step: float
    l_view: float
    total: float
    lr: float
    grad_norm: float
    tokens_per_sec: float
    wall_time: float
    v: int = METRICS_VERSION

    def to_json(self):
        return json.dumps(asdict(self))


@dataclass
class TrainState:
    student: torch.nn.Module
    teacher: TeacherState
    optimizer: torch.optim.Optimizer
    model_config: object
    train_config: TrainConfig
    codebook: np.ndarray
    patch_side: int
    step: int = 0


@dataclass
class Batch:
    tokens: torch.Tensor  # [B, M, T]
    conditions: torch.Tensor  # [B], after guidance dropout
    labels: torch.Tensor  # [B]


def cfg_dropout(condition, p, seed, null_id):
    """Returns null_id with probability p, else the condition."""
    rng = np.random.default_rng(seed)
    return int(null_id) if rng.uniform() < p else int(condition)


def learning_rate(config, step):
    """Linear warmup to the batch-scaled peak, constant after. step counts from 1."""
    peak = config.base_lr * config.batch_size / 256.0
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return peak * step / config.warmup_steps
    return peak


def param_groups(model, weight_decay):
    """Decay for weight matrices; none for embeddings, norm gains and biases."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim < 2 or "embedding" in name:
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_optimizer(model, config):
    return torch.optim.AdamW(param_groups(model, config.weight_decay), lr=learning_rate(config, 1),
                             betas=(config.beta1, config.beta2), eps=1e-8)


def new_train_state(student, model_config, train_config, codebook, patch_side):
    teacher = TeacherState(student, train_config.ema_decay)
    optimizer = build_optimizer(student, train_config)
    return TrainState(student, teacher, optimizer, model_config, train_config, codebook, patch_side)


def prepare_batch(state, pairs, step):
    """Tokenizes every view and applies condition dropout (one draw per image, shared by its views)."""
    if not pairs:
        raise UsageError("empty batch")
    cfg, mcfg = state.train_config, state.model_config
    tokens, conditions, labels = [], [], []
    for b, pair in enumerate(pairs):
        views = [quantize(view, state.codebook, state.patch_side) for view in pair.views]
        tokens.append(np.stack([seq.tokens for seq in views]))
        seed = seeding.derive_seed(cfg.seed, seeding.DROPOUT, step, b)
        conditions.append(cfg_dropout(pair.class_label, cfg.cfg_dropout, seed, mcfg.null_id))
        labels.append(pair.class_label)
    return Batch(torch.from_numpy(np.stack(tokens)).long(), torch.tensor(conditions), torch.tensor(labels))


def student_key_masks(state, batch_size, views, step):
    """One fresh KeyMask per (image, view); per layer too when mask_scope is per_layer."""
    mcfg, cfg = state.model_config, state.train_config
    if mcfg.mask_ratio == 0:
        return None
    masks = []
    for b in range(batch_size):
        for m in range(views):
            if mcfg.mask_scope == "per_layer":
                masks.append([
                    build_key_mask(mcfg.seq_len, mcfg.mask_ratio,
                                   seeding.derive_seed(cfg.seed, seeding.MASK, step, b, m, layer))
                    for layer in range(mcfg.layers)
                ])
            else:
                masks.append(build_key_mask(mcfg.seq_len, mcfg.mask_ratio,
                                            seeding.derive_seed(cfg.seed, seeding.MASK, step, b, m)))
    return masks


def compute_losses(state, batch, step):
    """Loss bundle for one prepared batch; gradients flow into the student only."""
    cfg, mcfg = state.train_config, state.model_config
    student = state.student
    batch_size, views, length = batch.tokens.shape
    flat_tokens = batch.tokens.reshape(batch_size * views, length)
    flat_conditions = batch.conditions.repeat_interleave(views)

    trace = student(flat_tokens, flat_conditions, student_key_masks(state, batch_size, views, step))
    ar_logits = trace.logits
    if cfg.ar_on_unmasked:
        ar_logits = student(flat_tokens, flat_conditions).logits
    l_ar = loss_ar(ar_logits, flat_tokens)
    zero = torch.zeros((), dtype=l_ar.dtype)
    l_mim = l_step = l_view = zero

    if cfg.masked_alignment or cfg.contrastive:
        reference = teacher_forward(state.teacher, flat_tokens, flat_conditions)
        if cfg.masked_alignment:
            l_mim = loss_mim(trace.final_hidden, reference.final_hidden)
        if cfg.contrastive:
            draw = sample_positions(cfg.k_steps, length, seeding.derive_seed(cfg.seed, seeding.POSITIONS, step))
            z_s = student.project(tap(trace, mcfg.tap_depth, draw.indices))
            z_s = z_s.reshape(batch_size, views, draw.k, -1)
            h_t = tap(reference, mcfg.tap_depth, draw.indices).reshape(batch_size, views, draw.k, -1)
            if cfg.use_step:
                l_step = loss_step(z_s, h_t, cfg.temperature, cfg.literal_ratio)
            if cfg.use_view:
                l_view = loss_view(z_s, h_t, cfg.temperature, cfg.literal_ratio)
    return loss_total(l_ar, l_mim, l_step, l_view, cfg.alpha, cfg.beta)


def train_step(state, pairs, epoch=0):
    """
    Runs one optimizer step on a batch of AugmentedPairs and returns its MetricsRecord.

    A non-finite loss raises before any parameter is touched.
    """
    cfg = state.train_config
    step = state.step + 1
    started = time.perf_counter()
    state.student.train()

    batch = prepare_batch(state, pairs, step)
    bundle = compute_losses(state, batch, step)

    state.optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    params = [p for p in state.student.parameters() if p.requires_grad]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
    if not math.isfinite(grad_norm):
        raise NumericsError(f"non-finite gradient norm at step {step}")
    lr = learning_rate(cfg, step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    ema_update(state.teacher, state.student)
    state.step = step

    elapsed = time.perf_counter() - started
    scalars = bundle.scalars()
    tokens = batch.tokens.numel()
    return MetricsRecord(
        step=step,
        epoch=int(epoch),
        l_ar=scalars["l_ar"],
        l_mim=scalars["l_mim"],
        l_step=scalars["l_step"],
        l_view=scalars["l_view"],
        total=scalars["total"],
        lr=lr,
        grad_norm=grad_norm,
        tokens_per_sec=tokens / elapsed if cfg.log_timing and elapsed > 0 else 0.0,
        wall_time=elapsed if cfg.log_timing else 0.0,
    )


def batch_for_step(images, config, step):
    """The images and views used at `step`; a pure function of (seed, step)."""
    rng = seeding.numpy_rng(config.seed, seeding.DATA, step)
    replace = config.batch_size > len(images)
    chosen = rng.choice(len(images), size=config.batch_size, replace=replace)
    members = [images[int(i)] for i in chosen]
    view_seed = seeding.derive_seed(config.seed, seeding.DATA, "views", step)
    return make_pairs(members, config.views, view_seed, augmented=config.augment)


def _trim_metrics(path, last_step):
    """Drops metric rows written after `last_step` (a resumed run rewrites them)."""
    if not os.path.exists(path):
        return
    with open(path) as f:
        rows = [line for line in f if line.strip() and json.loads(line)["step"] <= last_step]
    with open(path, "w") as f:
        f.writelines(rows)


def run_training(state, images, run_dir, save_checkpoint):
    """
    Trains until train_config.steps, appending to run_dir/metrics.jsonl.

    :param save_checkpoint: callable(path, state) writing a checkpoint.
    :return: list of MetricsRecords produced by this call.
    """
    cfg = state.train_config
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    checkpoint_path = os.path.join(run_dir, "checkpoint.ckpt")
    _trim_metrics(metrics_path, state.step)

    records = []
    steps = range(state.step + 1, cfg.steps + 1)
    progress = tqdm(steps, desc="train", disable=not cfg.progress, leave=False)
    with open(metrics_path, "a") as metrics:
        for step in progress:
            epoch = (step - 1) * cfg.batch_size // max(1, len(images))
            record = train_step(state, batch_for_step(images, cfg, step), epoch)
            metrics.write(record.to_json() + "\n")
            metrics.flush()
            records.append(record)
            progress.set_postfix(l_ar=f"{record.l_ar:.3f}", total=f"{record.total:.3f}")
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info("step %d  l_ar %.4f  l_mim %.4f  l_step %.4f  l_view %.4f  lr %.2e",
                            step, record.l_ar, record.l_mim, record.l_step, record.l_view, record.lr)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state)
    save_checkpoint(checkpoint_path, state)
    return records
