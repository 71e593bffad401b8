# model.py
"""
Llama-style causal decoder over discrete visual tokens.

Input row for a sequence x_1..x_T with condition c is
[class_embed(c), token_embed(x_1), ..., token_embed(x_{T-1})], so position t
predicts x_{t+1} from the condition and x_1..x_t. Attention takes an optional
per-sample key mask (random key columns set to -inf inside the softmax) on top of
the causal mask.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from . import numerics
from .errors import UsageError, VocabOverflowError

logger = logging.getLogger(__name__)

TRACE_LEVELS = ("logits_only", "full")
MASK_SCOPES = ("all_layers", "per_layer")


@dataclass
class ModelConfig:
    layers: int = 6
    width: int = 128
    heads: int = 4
    vocab_size: int = 64
    seq_len: int = 64
    num_classes: int = 10
    tap_depth: int = 3
    mask_ratio: float = 0.25
    mask_scope: str = "all_layers"
    mlp_ratio: int = 4
    projector_blocks: int = 3
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.width % self.heads:
            raise UsageError(f"model.width={self.width} is not divisible by model.heads={self.heads}")
        if self.head_dim % 4:
            raise UsageError(f"head dimension {self.head_dim} must be a multiple of 4 for 2-D rotary embedding")
        if not 1 <= self.tap_depth <= self.layers:
            raise UsageError(f"model.tap_depth={self.tap_depth} outside [1, {self.layers}]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise UsageError(f"model.mask_ratio={self.mask_ratio} outside [0, 1)")
        if self.mask_scope not in MASK_SCOPES:
            raise UsageError(f"model.mask_scope must be one of {MASK_SCOPES}")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def hidden_dim(self):
        return self.mlp_ratio * self.width

    @property
    def null_id(self):
        return self.num_classes

    @property
    def grid_width(self):
        return int(math.ceil(math.sqrt(self.seq_len)))

    def to_dict(self):
        return asdict(self)


def parameter_count(config):
    """Number of trainable scalars in StarDecoder(config), in closed form."""
    d, h, v = config.width, config.hidden_dim, config.vocab_size
    embeddings = v * d + (config.num_classes + 1) * d
    block = 4 * d * d + 3 * d * h + 2 * d
    head = d + d * v
    projector = config.projector_blocks * (d * d + d + d) + (d * d + d)
    return embeddings + config.layers * block + head + projector


@dataclass
class KeyMask:
    masked_keys: tuple
    ratio: float
    length: int

    def additive(self, dtype=torch.float32):
        """[T, T] additive form: causal mask plus -inf columns at masked_keys."""
        mask = causal_mask(self.length, dtype)
        if self.masked_keys:
            columns = torch.zeros(self.length, dtype=torch.bool)
            columns[list(self.masked_keys)] = True
            mask = mask.masked_fill(columns[None, :], numerics.mask_sentinel(dtype))
        return mask


def causal_mask(length, dtype=torch.float32):
    future = torch.ones(length, length, dtype=torch.bool).triu(diagonal=1)
    return torch.zeros(length, length, dtype=dtype).masked_fill(future, numerics.mask_sentinel(dtype))


def build_key_mask(length, ratio, seed):
    """
    Samples round(ratio * length) distinct key positions from 1..length-1.

    Position 0 holds the condition and is never masked, so every row keeps at
    least one admissible key.
    """
    if not 0.0 <= ratio < 1.0:
        raise UsageError(f"mask ratio {ratio} outside [0, 1)")
    count = int(math.floor(ratio * length + 0.5))
    count = min(count, length - 1)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.arange(1, length), size=count, replace=False) if count else []
    return KeyMask(tuple(sorted(int(k) for k in chosen)), float(ratio), int(length))


@dataclass
class ForwardTrace:
    hidden_states: list  # per layer [B, T, D]
    logits: torch.Tensor  # [B, T, V]
    attentions: list = field(default=None)  # per layer [B, heads, T, T] when trace_level == "full"
    trace_level: str = "logits_only"

    @property
    def final_hidden(self):
        return self.hidden_states[-1]


def tap(trace, depth, positions):
    """
    Hidden states of layer `depth` (1-indexed) at the given sequence positions -> [B, K, D].
    """
    layers = len(trace.hidden_states)
    if not 1 <= depth <= layers:
        raise UsageError(f"tap depth {depth} outside [1, {layers}]")
    length = trace.hidden_states[0].shape[1]
    positions = [int(p) for p in positions]
    if any(p < 0 or p >= length for p in positions):
        raise UsageError(f"tap positions {positions} outside [0, {length})")
    return trace.hidden_states[depth - 1][:, positions, :]


class RMSNorm(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return numerics.rms_norm(x, self.weight, self.eps)


def rotary_tables(config, dtype=torch.float32):
    """
    cos/sin tables [T, head_dim/2] for rotary embedding over the token grid.

    The first half of each head rotates with the grid row, the second half with the
    grid column. Position 0 (the condition) is left unrotated.
    """
    quarter = config.head_dim // 4
    freqs = 1.0 / (config.rope_base ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    index = torch.arange(config.seq_len, dtype=torch.float64)
    cell = (index - 1).clamp(min=0)
    rows = torch.div(cell, config.grid_width, rounding_mode="floor")
    cols = cell - rows * config.grid_width
    angles = torch.cat([rows[:, None] * freqs[None], cols[:, None] * freqs[None]], dim=-1)
    angles[0] = 0.0
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def apply_rotary(x, cos, sin):
    # x: [B, heads, T, head_dim]; cos/sin: [T, head_dim/2]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return rotated.flatten(-2)


class KVCache:
    """Keys and values of already-decoded positions, one entry per layer."""

    def __init__(self, layers):
        self.keys = [None] * layers
        self.values = [None] * layers

    @property
    def length(self):
        return 0 if self.keys[0] is None else self.keys[0].shape[2]

    def extend(self, layer, k, v):
        if self.keys[layer] is not None:
            k = torch.cat([self.keys[layer], k], dim=2)
            v = torch.cat([self.values[layer], v], dim=2)
        self.keys[layer], self.values[layer] = k, v
        return k, v


class Attention(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.wq = nn.Linear(config.width, config.width, bias=False)
        self.wk = nn.Linear(config.width, config.width, bias=False)
        self.wv = nn.Linear(config.width, config.width, bias=False)
        self.wo = nn.Linear(config.width, config.width, bias=False)

    def forward(self, x, cos, sin, additive_mask, cache=None, layer=0):
        batch, length, width = x.shape
        q = self.wq(x).view(batch, length, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(batch, length, self.heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(batch, length, self.heads, self.head_dim).transpose(1, 2)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        if cache is not None:
            k, v = cache.extend(layer, k, v)

        scores = numerics.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        probs = numerics.masked_softmax(scores, additive_mask[:, None, :, :])
        out = numerics.matmul(probs, v).transpose(1, 2).reshape(batch, length, width)
        return self.wo(out), probs


class FeedForward(nn.Module):
    """GELU-gated MLP: w2(gelu(w1 x) * w3 x)."""

    def __init__(self, config):
        super().__init__()
        self.w1 = nn.Linear(config.width, config.hidden_dim, bias=False)
        self.w3 = nn.Linear(config.width, config.hidden_dim, bias=False)
        self.w2 = nn.Linear(config.hidden_dim, config.width, bias=False)

    def forward(self, x):
        return self.w2(numerics.gelu(self.w1(x)) * self.w3(x))


class TransformerBlock(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.attention_norm = RMSNorm(config.width, config.norm_eps)
        self.attention = Attention(config)
        self.ffn_norm = RMSNorm(config.width, config.norm_eps)
        self.feed_forward = FeedForward(config)

    def forward(self, x, cos, sin, additive_mask, cache=None, layer=0):
        attended, probs = self.attention(self.attention_norm(x), cos, sin, additive_mask, cache, layer)
        h = x + attended
        return h + self.feed_forward(self.ffn_norm(h)), probs


class Projector(nn.Module):
    """
    Contrastive head f(.): `blocks` x (linear -> RMSNorm -> GELU), then a final linear.

    linear_only skips the norms and nonlinearities.
    """

    def __init__(self, width, out_width, blocks=3, eps=1e-6):
        super().__init__()
        self.linears = nn.ModuleList([nn.Linear(width, width) for _ in range(blocks)])
        self.norms = nn.ModuleList([RMSNorm(width, eps) for _ in range(blocks)])
        self.out = nn.Linear(width, out_width)
        self.linear_only = False

    def forward(self, h):
        for linear, norm in zip(self.linears, self.norms):
            h = linear(h)
            if not self.linear_only:
                h = numerics.gelu(norm(h))
        return self.out(h)

    @torch.no_grad()
    def set_identity(self):
        for linear in list(self.linears) + [self.out]:
            linear.weight.copy_(torch.eye(linear.out_features, linear.in_features))
            linear.bias.zero_()
        self.linear_only = True


class StarDecoder(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.tok_embeddings = nn.Embedding(config.vocab_size, config.width)
        self.cls_embedding = nn.Embedding(config.num_classes + 1, config.width)
        self.layers = nn.ModuleList([TransformerBlock(config) for _ in range(config.layers)])
        self.norm = RMSNorm(config.width, config.norm_eps)
        self.output = nn.Linear(config.width, config.vocab_size, bias=False)
        self.projector = Projector(config.width, config.width, config.projector_blocks, config.norm_eps)
        cos, sin = rotary_tables(config)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def _check_inputs(self, tokens, conditions):
        if tokens is not None and tokens.numel() and (int(tokens.max()) >= self.config.vocab_size or int(tokens.min()) < 0):
            raise VocabOverflowError(
                f"vocab overflow: token {int(tokens.max())} outside [0, {self.config.vocab_size})")
        if conditions is not None and conditions.numel() and (int(conditions.max()) > self.config.num_classes or int(conditions.min()) < 0):
            raise UsageError(f"condition {int(conditions.max())} outside [0, {self.config.num_classes}]")

    def layer_masks(self, key_masks, batch, dtype):
        """
        Per-layer additive masks [B, T, T].

        key_masks is None, a list of B KeyMasks shared by all layers, or a list of B
        lists of per-layer KeyMasks.
        """
        length = self.config.seq_len
        if key_masks is None:
            shared = causal_mask(length, dtype).expand(batch, length, length)
            return [shared] * self.config.layers
        if len(key_masks) != batch:
            raise UsageError(f"{len(key_masks)} key masks for a batch of {batch}")
        if isinstance(key_masks[0], KeyMask):
            shared = torch.stack([m.additive(dtype) for m in key_masks])
            return [shared] * self.config.layers
        return [
            torch.stack([per_sample[layer].additive(dtype) for per_sample in key_masks])
            for layer in range(self.config.layers)
        ]

    def forward(self, tokens, conditions, key_masks=None, trace_level="logits_only"):
        """
        :param tokens: [B, T] token ids x_1..x_T.
        :param conditions: [B] class ids (num_classes = null condition).
        :param key_masks: see layer_masks.
        :param trace_level: "logits_only" keeps hidden states and logits, "full" adds attention maps.
        :return: ForwardTrace
        """
        if trace_level not in TRACE_LEVELS:
            raise UsageError(f"trace level must be one of {TRACE_LEVELS}")
        batch, length = tokens.shape
        if length != self.config.seq_len:
            raise UsageError(f"sequence length {length} != model.seq_len={self.config.seq_len}")
        self._check_inputs(tokens, conditions)

        x = torch.cat([
            self.cls_embedding(conditions)[:, None, :],
            self.tok_embeddings(tokens[:, :-1]),
        ], dim=1)
        masks = self.layer_masks(key_masks, batch, x.dtype)
        cos, sin = self.rope_cos.to(x.dtype), self.rope_sin.to(x.dtype)

        hidden_states, attentions = [], []
        for layer, block in enumerate(self.layers):
            x, probs = block(x, cos, sin, masks[layer])
            hidden_states.append(x)
            if trace_level == "full":
                attentions.append(probs)
        logits = self.output(self.norm(x))
        return ForwardTrace(hidden_states, logits, attentions if trace_level == "full" else None, trace_level)

    def project(self, h):
        return self.projector(h)

    def decode_step(self, conditions, previous_tokens, cache):
        """
        Feeds one position through the decoder using cached keys and values.

        :param conditions: [B] condition ids, used when the cache is empty.
        :param previous_tokens: [B] token ids fed at this position (ignored at position 0).
        :param cache: KVCache, extended in place.
        :return: logits [B, V] for the next token.
        """
        position = cache.length
        if position >= self.config.seq_len:
            raise UsageError(f"cannot decode past model.seq_len={self.config.seq_len}")
        if position == 0:
            self._check_inputs(None, conditions)
            x = self.cls_embedding(conditions)[:, None, :]
        else:
            self._check_inputs(previous_tokens, None)
            x = self.tok_embeddings(previous_tokens)[:, None, :]
        cos = self.rope_cos[position:position + 1].to(x.dtype)
        sin = self.rope_sin[position:position + 1].to(x.dtype)
        visible = torch.zeros(x.shape[0], 1, position + 1, dtype=x.dtype)
        for layer, block in enumerate(self.layers):
            x, _ = block(x, cos, sin, visible, cache, layer)
        return self.output(self.norm(x))[:, 0, :]


def init_weights(model, seed, std=0.02):
    """Normal(0, std) for every linear and embedding matrix, zero biases, unit norm gains."""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            elif param.ndim == 1:
                param.fill_(1.0)
            else:
                param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)
    return model


def build_model(config, seed=0):
    model = init_weights(StarDecoder(config), seed)
    logger.info("built decoder: %d parameters", parameter_count(config))
    return model


def params_checksum(module):
    """SHA-256 over every parameter and persistent buffer, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
