# run_files.py
"""Locations and loaders shared by the commands: dataset, run directory, manifest."""
import glob
import hashlib
import json
import logging
import os
from datetime import datetime, timezone

from ..config import settings
from ..core import seeding
from ..core.data_toy import synth_dataset
from ..core.errors import ArtifactMismatchError, UsageError
from ..core.model import build_model
from ..storage import checkpoint_store, token_store

logger = logging.getLogger(__name__)

PACKAGE_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

TOKENS_FILE = "tokens.startok"
CODEBOOK_FILE = "codebook.bin"
DATASET_FILE = "dataset.ini"
CONFIG_FILE = "config.ini"
MANIFEST_FILE = "manifest.json"
FINISHED_FILE = "finished.json"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.ckpt"


def now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def code_hash():
    """SHA-256 over driver.py and every source file of the package, in path order."""
    digest = hashlib.sha256()
    paths = [os.path.join(PACKAGE_ROOT, "driver.py")]
    paths += glob.glob(os.path.join(PACKAGE_ROOT, "src", "**", "*.py"), recursive=True)
    paths += glob.glob(os.path.join(PACKAGE_ROOT, "src", "**", "*.ini"), recursive=True)
    for path in sorted(p for p in paths if os.path.exists(p)):
        digest.update(os.path.relpath(path, PACKAGE_ROOT).encode("utf-8"))
        with open(path, "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


def save_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    if not os.path.exists(path):
        raise ArtifactMismatchError(f"{path} not found", field=os.path.basename(path))
    with open(path) as f:
        return json.load(f)


def write_manifest(run_dir, command, config, artifacts, extra=None):
    """RunManifest: written once, before any work; later commands never rewrite it."""
    path = os.path.join(run_dir, MANIFEST_FILE)
    if os.path.exists(path):
        return load_json(path)
    seed = config["train"].getint("seed")
    manifest = {
        "command": command,
        "config": settings.flat_items(config),
        "code_sha256": code_hash(),
        "seed": seed,
        "named_seeds": {
            stream: seeding.derive_seed(seed, stream)
            for stream in (seeding.DATA, seeding.MASK, seeding.DROPOUT, seeding.POSITIONS,
                           seeding.SAMPLE, seeding.PROBE)
        },
        "started": now(),
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    save_json(path, manifest)
    return manifest


def write_finished(run_dir, payload):
    save_json(os.path.join(run_dir, FINISHED_FILE), dict(payload, finished=now()))


def fresh_directory(path):
    """Creates `path`; refuses one that already holds files."""
    if os.path.isdir(path) and os.listdir(path):
        raise UsageError(f"{path} is not empty; refusing to overwrite")
    os.makedirs(path, exist_ok=True)


class Dataset:
    """Token file, codebook and synthesis parameters of one make-data output directory."""

    def __init__(self, data_dir):
        self.data_dir = data_dir
        self.params = token_store.read_dataset_manifest(os.path.join(data_dir, DATASET_FILE))
        self.codebook = token_store.read_codebook(os.path.join(data_dir, CODEBOOK_FILE))
        if len(self.codebook) != self.params["vocab_size"]:
            raise ArtifactMismatchError(
                f"codebook has {len(self.codebook)} entries, dataset.ini says {self.params['vocab_size']}",
                field="data.vocab_size")
        self._sequences = None

    @property
    def patch_side(self):
        return self.params["patch_side"]

    @property
    def vocab_size(self):
        return self.params["vocab_size"]

    @property
    def num_classes(self):
        return self.params["num_classes"]

    @property
    def seq_len(self):
        return (self.params["image_side"] // self.params["patch_side"]) ** 2

    @property
    def sequences(self):
        if self._sequences is None:
            header, self._sequences = token_store.read_tokens(os.path.join(self.data_dir, TOKENS_FILE))
            if header["T"] != self.seq_len or header["V"] != self.vocab_size:
                raise ArtifactMismatchError(f"{TOKENS_FILE} does not match {DATASET_FILE}", field="data.dir")
        return self._sequences

    def images(self):
        """Re-renders the source images the tokens were made from."""
        p = self.params
        return synth_dataset(p["num_classes"], p["per_class"], p["image_side"], p["seed"], p["patch_side"])

    def model_config(self, config):
        return settings.model_config(config, self.vocab_size, self.seq_len, self.num_classes)


def run_config(run_dir, config_path=None, overrides=()):
    """A run's own config.ini is the base for every command that reads the run."""
    base = config_path or os.path.join(run_dir, CONFIG_FILE)
    if not os.path.exists(base):
        raise ArtifactMismatchError(f"{base} not found; is {run_dir} a training run?", field="run.out")
    return settings.load_config(base, overrides)


def load_trained_model(run_dir, config):
    """
    Rebuilds the student of a run from its checkpoint.

    :return: (model, ModelConfig, Dataset, checkpoint step)
    """
    dataset = Dataset(config["data"]["dir"])
    model_config = dataset.model_config(config)
    model = build_model(model_config)
    checkpoint = checkpoint_store.load_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE))
    step = checkpoint_store.restore(checkpoint, model_config, model)
    model.eval()
    return model, model_config, dataset, step


def flag_overrides(pairs):
    """[(section, key, value), ...] for every flag that was given (value not None)."""
    return [(section, key, value) for section, key, value in pairs if value is not None]
