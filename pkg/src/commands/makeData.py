# makeData.py
import logging
import os
from collections import Counter

from ..config import settings
from ..core import seeding
from ..core.data_toy import build_codebook, quantize, synth_dataset
from ..core.errors import StarError
from ..storage import token_store
from . import run_files

logger = logging.getLogger(__name__)


class makeData:
    def __init__(self, config_path=None, overrides=()):
        """
        :param config_path: Optional user INI file.
        :param overrides: 'section.key=value' strings from --set.
        """
        self.config_path = config_path
        self.overrides = list(overrides)
        self.config = None
        self.summary = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--out", help="output directory (data.dir)")
        parser.add_argument("--classes", type=int, help="number of classes C (data.num_classes)")
        parser.add_argument("--per-class", type=int, help="images per class (data.per_class)")
        parser.add_argument("--image-side", type=int, help="image side in pixels (data.image_side)")
        parser.add_argument("--patch-side", type=int, help="tokenizer patch side (data.patch_side)")
        parser.add_argument("--vocab", type=int, help="codebook size V (data.vocab_size)")
        parser.add_argument("--seed", type=int, help="synthesis seed (data.seed)")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Synthesizes the class-conditional toy images, fits the patch codebook and writes\n"
            "the token dataset.\n\n"
            "Output: tokens.startok, codebook.bin and dataset.ini in data.dir."
        )

    def getInput(self, args):
        """
        Layers the dataset flags over the configuration.

        :param args: Parsed flags (out, classes, per_class, image_side, patch_side, vocab, seed).
        """
        flags = run_files.flag_overrides([
            ("data", "dir", args.out),
            ("data", "num_classes", args.classes),
            ("data", "per_class", args.per_class),
            ("data", "image_side", args.image_side),
            ("data", "patch_side", args.patch_side),
            ("data", "vocab_size", args.vocab),
            ("data", "seed", args.seed),
        ])
        try:
            self.config = settings.load_config(self.config_path, self.overrides + flags)
        except StarError as e:
            self.error_message = str(e)
            self.exit_code = e.exit_code

    def retrieveOutput(self):
        """Builds the dataset, then re-reads the written file to count sequences per class."""
        if self.error_message:
            return
        try:
            d = self.config["data"]
            params = {
                "num_classes": d.getint("num_classes"),
                "per_class": d.getint("per_class"),
                "image_side": d.getint("image_side"),
                "patch_side": d.getint("patch_side"),
                "vocab_size": d.getint("vocab_size"),
                "seed": d.getint("seed"),
            }
            images = synth_dataset(params["num_classes"], params["per_class"], params["image_side"],
                                   params["seed"], params["patch_side"])
            codebook = build_codebook(images, params["vocab_size"], params["patch_side"],
                                      seeding.derive_seed(params["seed"], "codebook"),
                                      iterations=d.getint("codebook_iterations"))
            sequences = [quantize(image, codebook, params["patch_side"]) for image in images]
            for seq in sequences:
                seq.validate(params["vocab_size"], params["num_classes"])
            length = (params["image_side"] // params["patch_side"]) ** 2

            out = d["dir"]
            os.makedirs(out, exist_ok=True)
            token_store.write_tokens(os.path.join(out, run_files.TOKENS_FILE), sequences,
                                     params["vocab_size"], length, params["num_classes"])
            token_store.write_codebook(os.path.join(out, run_files.CODEBOOK_FILE), codebook)
            token_store.write_dataset_manifest(os.path.join(out, run_files.DATASET_FILE), params)

            header, written = token_store.read_tokens(os.path.join(out, run_files.TOKENS_FILE))
            self.summary = {
                "dir": out,
                "C": header["C"],
                "V": header["V"],
                "T": header["T"],
                "count": header["count"],
                "per_class": dict(sorted(Counter(seq.condition for seq in written).items())),
            }
        except StarError as e:
            self.error_message = f"Error building the dataset: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the output directory and the sequence count of every class."""
        if self.error_message:
            print(self.error_message)
        elif self.summary:
            s = self.summary
            print(f"Token dataset written to {s['dir']}")
            print(f"Classes: {s['C']}  Vocabulary: {s['V']}  Sequence length: {s['T']}  Sequences: {s['count']}")
            for label, count in s["per_class"].items():
                print(f"  class {label}: {count}")
        else:
            print("No output to display.")
