# token_store.py
"""
Binary formats for token datasets and codebooks (little-endian).

Token dataset: b"STARTOK1", then u32 V, T, C, count, then count records of
(condition: u16, tokens: T x u16).
Codebook: b"STARCB01", then u32 V, feature_dim, then V x feature_dim float32.
"""
import configparser
import logging
import os

import numpy as np

from ..core.data_toy import TokenSequence
from ..core.errors import ArtifactMismatchError, ChecksumError

logger = logging.getLogger(__name__)

TOKENS_MAGIC = b"STARTOK1"
CODEBOOK_MAGIC = b"STARCB01"
_HEADER = np.dtype([("v", "<u4"), ("t", "<u4"), ("c", "<u4"), ("count", "<u4")])
_CB_HEADER = np.dtype([("v", "<u4"), ("dim", "<u4")])


def _record_dtype(length):
    return np.dtype([("condition", "<u2"), ("tokens", "<u2", (length,))])


def write_tokens(path, sequences, vocab_size, length, num_classes):
    """
    Writes token sequences to `path`.

    :param sequences: Iterable of TokenSequence, all of the same length.
    """
    sequences = list(sequences)
    records = np.zeros(len(sequences), dtype=_record_dtype(length))
    for i, seq in enumerate(sequences):
        if len(seq) != length:
            raise ArtifactMismatchError(f"sequence {i} has length {len(seq)}, expected {length}", field="T")
        records[i]["condition"] = seq.condition
        records[i]["tokens"] = seq.tokens
    header = np.array([(vocab_size, length, num_classes, len(sequences))], dtype=_HEADER)
    with open(path, "wb") as f:
        f.write(TOKENS_MAGIC)
        f.write(header.tobytes())
        f.write(records.tobytes())
    logger.info("wrote %d sequences to %s", len(sequences), path)


def read_tokens(path):
    """
    Reads a token dataset.

    :return: (header dict with V, T, C, count; list of TokenSequence)
    """
    if not os.path.exists(path):
        raise ArtifactMismatchError(f"token dataset {path} not found", field="data.dir")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(TOKENS_MAGIC)] != TOKENS_MAGIC:
        raise ChecksumError(f"{path} is not a token dataset (bad magic)")
    offset = len(TOKENS_MAGIC)
    if len(blob) < offset + _HEADER.itemsize:
        raise ChecksumError(f"{path} is truncated inside the header")
    head = np.frombuffer(blob, dtype=_HEADER, count=1, offset=offset)[0]
    header = {"V": int(head["v"]), "T": int(head["t"]), "C": int(head["c"]), "count": int(head["count"])}
    offset += _HEADER.itemsize
    dtype = _record_dtype(header["T"])
    if len(blob) != offset + dtype.itemsize * header["count"]:
        raise ChecksumError(f"{path} holds {len(blob) - offset} payload bytes, expected "
                            f"{dtype.itemsize * header['count']}")
    records = np.frombuffer(blob, dtype=dtype, count=header["count"], offset=offset)
    side = int(round(header["T"] ** 0.5))
    sequences = [
        TokenSequence(rec["tokens"].astype(np.int64), int(rec["condition"]), side)
        for rec in records
    ]
    return header, sequences


def write_codebook(path, codebook):
    codebook = np.asarray(codebook, dtype="<f4")
    header = np.array([(codebook.shape[0], codebook.shape[1])], dtype=_CB_HEADER)
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(header.tobytes())
        f.write(codebook.tobytes())


def read_codebook(path):
    if not os.path.exists(path):
        raise ArtifactMismatchError(f"codebook {path} not found", field="data.dir")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CODEBOOK_MAGIC)] != CODEBOOK_MAGIC:
        raise ChecksumError(f"{path} is not a codebook (bad magic)")
    offset = len(CODEBOOK_MAGIC)
    head = np.frombuffer(blob, dtype=_CB_HEADER, count=1, offset=offset)[0]
    vocab, dim = int(head["v"]), int(head["dim"])
    offset += _CB_HEADER.itemsize
    if len(blob) != offset + vocab * dim * 4:
        raise ChecksumError(f"{path} is truncated: expected {vocab}x{dim} floats")
    return np.frombuffer(blob, dtype="<f4", count=vocab * dim, offset=offset).reshape(vocab, dim).copy()


def write_dataset_manifest(path, params):
    """Records the synthesis parameters so images can be re-rendered for online augmentation."""
    config = configparser.ConfigParser()
    config["dataset"] = {key: str(value) for key, value in sorted(params.items())}
    with open(path, "w") as f:
        config.write(f)


def read_dataset_manifest(path):
    if not os.path.exists(path):
        raise ArtifactMismatchError(f"dataset manifest {path} not found", field="data.dir")
    config = configparser.ConfigParser()
    config.read(path)
    section = config["dataset"]
    return {
        "num_classes": section.getint("num_classes"),
        "per_class": section.getint("per_class"),
        "image_side": section.getint("image_side"),
        "patch_side": section.getint("patch_side"),
        "vocab_size": section.getint("vocab_size"),
        "seed": section.getint("seed"),
    }
