# checkpoint_store.py
"""
Checkpoint container: one file holding a JSON manifest and a raw tensor payload.

Layout: b"STARCKP1", u64 manifest length (little-endian), manifest JSON (UTF-8,
sorted keys), payload. The manifest maps every tensor name to (shape, dtype,
offset, nbytes) inside the payload and carries the payload's SHA-256.
"""
import hashlib
import json
import logging
import os
import struct

import numpy as np
import torch

from ..core.errors import ArtifactMismatchError, ChecksumError

logger = logging.getLogger(__name__)

MAGIC = b"STARCKP1"
_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}


def _dtype_name(tensor):
    name = str(tensor.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise ArtifactMismatchError(f"cannot store tensors of dtype {name}", field="dtype")
    return name


def write_container(path, meta, tensors):
    """
    :param meta: JSON-serializable dict (config, step, ...); stored under "meta".
    :param tensors: dict name -> tensor, written in sorted name order.
    """
    directory, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        dtype = _dtype_name(tensor)
        data = tensor.numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
        directory[name] = {"shape": list(tensor.shape), "dtype": dtype, "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "format": MAGIC.decode("ascii"),
        "meta": meta,
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    encoded = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        f.write(payload)
    os.replace(tmp_path, path)


def read_container(path):
    """:return: (meta dict, dict name -> tensor)"""
    if not os.path.exists(path):
        raise ArtifactMismatchError(f"checkpoint {path} not found", field="checkpoint")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ChecksumError(f"{path} is not a checkpoint (bad magic)")
    start = len(MAGIC) + 8
    if len(blob) < start:
        raise ChecksumError(f"{path} is truncated inside the header")
    (length,) = struct.unpack("<Q", blob[len(MAGIC):start])
    try:
        manifest = json.loads(blob[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ChecksumError(f"{path}: manifest is corrupt")
    payload = blob[start + length:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise ChecksumError(f"{path}: payload checksum mismatch (corrupt or partial file)")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        tensors[name] = torch.from_numpy(array).to(torch_dtype)
    return manifest["meta"], tensors


def check_model_config(saved, config):
    """Raises ArtifactMismatchError naming the first model field that differs."""
    current = config.to_dict()
    for key in sorted(set(saved) | set(current)):
        if saved.get(key) != current.get(key):
            raise ArtifactMismatchError(
                f"checkpoint was written for model.{key}={saved.get(key)}, run has {current.get(key)}",
                field=f"model.{key}")


def _optimizer_tensors(student, optimizer):
    names = {id(p): n for n, p in student.named_parameters()}
    tensors = {}
    for group in optimizer.param_groups:
        for param in group["params"]:
            for key, value in optimizer.state.get(param, {}).items():
                if torch.is_tensor(value):
                    tensors[f"optim/{names[id(param)]}/{key}"] = value
    return tensors


def save_checkpoint(path, student, teacher, optimizer, step, config):
    """Student, teacher and AdamW moments plus the step counter, in one container."""
    tensors = {f"student/{n}": t for n, t in student.state_dict().items()}
    tensors.update({f"teacher/{n}": t for n, t in teacher.params.state_dict().items()})
    if optimizer is not None:
        tensors.update(_optimizer_tensors(student, optimizer))
    meta = {
        "step": int(step),
        "model": config.to_dict(),
        "teacher": {"decay": teacher.decay, "steps_applied": teacher.steps_applied},
    }
    write_container(path, meta, tensors)
    logger.info("saved checkpoint at step %d to %s", step, path)


def load_checkpoint(path):
    """:return: dict with meta, step and the raw tensors."""
    meta, tensors = read_container(path)
    return {"meta": meta, "step": int(meta["step"]), "tensors": tensors}


def _prefixed(tensors, prefix):
    return {name[len(prefix):]: t for name, t in tensors.items() if name.startswith(prefix)}


def restore(checkpoint, config, student, teacher=None, optimizer=None):
    """Loads a checkpoint into live objects after checking it matches `config`."""
    check_model_config(checkpoint["meta"]["model"], config)
    tensors = checkpoint["tensors"]
    student.load_state_dict(_prefixed(tensors, "student/"))
    if teacher is not None:
        teacher.params.load_state_dict(_prefixed(tensors, "teacher/"))
        teacher.steps_applied = int(checkpoint["meta"]["teacher"]["steps_applied"])
    if optimizer is not None:
        saved = _prefixed(tensors, "optim/")
        names = {id(p): n for n, p in student.named_parameters()}
        state, index = {}, 0
        for group in optimizer.param_groups:
            for param in group["params"]:
                prefix = names[id(param)] + "/"
                entry = {key[len(prefix):]: value for key, value in saved.items() if key.startswith(prefix)}
                if entry:
                    state[index] = entry
                index += 1
        optimizer.load_state_dict({"state": state, "param_groups": optimizer.state_dict()["param_groups"]})
    return checkpoint["step"]
