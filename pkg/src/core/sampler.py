# sampler.py
"""
Class-conditional decoding with classifier-free guidance.

Each step runs the decoder twice on the same prefix, once with the class and once
with the null condition, combines the two logit vectors, then applies temperature,
top-k truncation and a categorical draw, in that order.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import seeding
from .data_toy import TokenSequence
from .errors import SamplingError, UsageError
from .model import KVCache

logger = logging.getLogger(__name__)


@dataclass
class SampleConfig:
    cfg_scale: float = 2.0
    temperature: float = 1.0
    top_k: int = 0  # 0 keeps the whole vocabulary
    seed: int = 0
    count: int = 8
    use_cache: bool = True

    def __post_init__(self):
        if self.cfg_scale < 1.0:
            raise UsageError(f"cfg scale {self.cfg_scale} must be >= 1")
        if self.temperature <= 0:
            raise UsageError(f"sampling temperature {self.temperature} must be > 0")
        if self.top_k < 0:
            raise UsageError(f"top_k {self.top_k} must be >= 0")
        if self.count < 1:
            raise UsageError("sample count must be >= 1")

    def keep(self, vocab_size):
        """Number of logits top-k truncation keeps for a vocabulary of vocab_size."""
        if self.top_k > vocab_size:
            raise UsageError(f"top_k {self.top_k} exceeds the vocabulary of {vocab_size}")
        return self.top_k or vocab_size


def cfg_combine(cond_logits, uncond_logits, scale):
    """uncond + scale * (cond - uncond)"""
    if cond_logits.shape != uncond_logits.shape:
        raise UsageError(f"guidance needs equal shapes, got {tuple(cond_logits.shape)} and {tuple(uncond_logits.shape)}")
    return uncond_logits + scale * (cond_logits - uncond_logits)


def sample_token(logits, temperature, top_k, generator, num_samples=1):
    """
    Draws token ids from logits [V] after temperature and top-k.

    :param top_k: Logits kept before renormalizing; ties at the boundary are broken by index.
    :param num_samples: Independent draws (with replacement) from the same distribution.
    :return: LongTensor [num_samples]
    """
    if not torch.isfinite(logits).all():
        raise SamplingError("non-finite logits at sampling time")
    scaled = logits.double() / temperature
    if top_k < scaled.shape[-1]:
        _, keep = torch.topk(scaled, top_k)
        filtered = torch.full_like(scaled, float("-inf"))
        filtered[keep] = scaled[keep]
        scaled = filtered
    probs = torch.softmax(scaled, dim=-1)
    return torch.multinomial(probs, num_samples, replacement=True, generator=generator)


@torch.no_grad()
def _next_logits_cached(model, conditions, previous, cache):
    return model.decode_step(conditions, previous, cache)


@torch.no_grad()
def _next_logits_full(model, conditions, prefix, position):
    # positions >= `position` hold placeholders; the causal mask keeps them out of row `position`
    return model(prefix, conditions).logits[:, position, :]


def generate(model, config, class_label, sample_cfg, index=0):
    """
    Decodes one sequence of config.seq_len tokens for `class_label`.

    :param model: StarDecoder (left in eval mode).
    :param config: ModelConfig the model was built with.
    :param sample_cfg: SampleConfig; seed and index pick the random stream.
    :return: TokenSequence
    """
    if not 0 <= class_label < config.num_classes:
        raise UsageError(f"class {class_label} outside [0, {config.num_classes})")
    model.eval()
    top_k = sample_cfg.keep(config.vocab_size)
    generator = seeding.torch_generator(sample_cfg.seed, seeding.SAMPLE, class_label, index)
    conditions = torch.tensor([class_label, config.null_id])
    length = config.seq_len

    tokens = []
    cache = KVCache(config.layers) if sample_cfg.use_cache else None
    prefix = torch.zeros(2, length, dtype=torch.long)
    for t in range(length):
        if cache is not None:
            previous = torch.tensor([tokens[-1]] * 2) if tokens else None
            logits = _next_logits_cached(model, conditions, previous, cache)
        else:
            logits = _next_logits_full(model, conditions, prefix, t)
        guided = cfg_combine(logits[0], logits[1], sample_cfg.cfg_scale)
        token = int(sample_token(guided, sample_cfg.temperature, top_k, generator)[0])
        tokens.append(token)
        prefix[:, t] = token
    return TokenSequence(np.asarray(tokens, dtype=np.int64), int(class_label), config.grid_width)


def generate_batch(model, config, class_label, sample_cfg):
    """sample_cfg.count sequences, each with its own random stream."""
    samples = [generate(model, config, class_label, sample_cfg, index=i) for i in range(sample_cfg.count)]
    logger.info("sampled %d sequences for class %d (cfg %.2f, top-k %d)",
                len(samples), class_label, sample_cfg.cfg_scale, sample_cfg.keep(config.vocab_size))
    return samples
