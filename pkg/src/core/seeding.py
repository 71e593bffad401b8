# seeding.py
import hashlib

import numpy as np
import torch

# Streams used by the trainer. Each draw is keyed by (global seed, stream, step, ...)
# so the order in which work is scheduled never changes a result.
DATA = "data"
MASK = "mask"
DROPOUT = "dropout"
POSITIONS = "positions"
SAMPLE = "sample"
PROBE = "probe"


def derive_seed(global_seed, *keys):
    """
    Hashes the global seed and any number of stream keys into a 63-bit seed.

    :param global_seed: The run seed.
    :param keys: Stream name, step, sample index, ... (anything with a stable str()).
    """
    text = "/".join([str(int(global_seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def numpy_rng(global_seed, *keys):
    return np.random.default_rng(derive_seed(global_seed, *keys))


def torch_generator(global_seed, *keys):
    generator = torch.Generator()
    generator.manual_seed(derive_seed(global_seed, *keys))
    return generator
