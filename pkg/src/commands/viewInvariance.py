# viewInvariance.py
import logging
import os

from ..config import settings
from ..core import seeding
from ..core.data_toy import make_pairs
from ..core.diagnostics import view_invariance
from ..core.errors import StarError
from . import run_files

logger = logging.getLogger(__name__)

INVARIANCE_FILE = "invariance.json"


def invariance_pairs(images, count, seed):
    """`count` images (without replacement while they last) with two augmented views each."""
    rng = seeding.numpy_rng(seed, seeding.DATA, "invariance")
    chosen = rng.choice(len(images), size=count, replace=count > len(images))
    return make_pairs([images[int(i)] for i in chosen], 2, seeding.derive_seed(seed, "invariance"))


class viewInvariance:
    def __init__(self, config_path=None, overrides=()):
        """
        :param config_path: Optional INI file (replaces the run's config.ini when --run is given).
        :param overrides: 'section.key=value' strings from --set.
        """
        self.config_path = config_path
        self.overrides = list(overrides)
        self.config = None
        self.run_dir = None
        self.layer = None
        self.record = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--run", help="training run directory; without it only the tokenizer is measured")
        parser.add_argument("--data", help="dataset directory (data.dir)")
        parser.add_argument("--pairs", type=int, help="number of augmented pairs (diagnostics.pairs)")
        parser.add_argument("--layer", type=int, help="1-indexed feature layer (default model.tap_depth)")
        parser.add_argument("--seed", type=int, help="pair selection seed (diagnostics.seed)")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Measures how often the tokenizer changes a token between two augmented views of an\n"
            "image and, given a run, the cosine similarity of its features at matched positions.\n\n"
            "Output: invariance.json in the run directory (printed only without --run)."
        )

    def getInput(self, args):
        """
        Takes the run (optional), the dataset and the pair options.

        :param args: Parsed flags (run, data, pairs, layer, seed).
        """
        flags = run_files.flag_overrides([
            ("data", "dir", args.data),
            ("diagnostics", "pairs", args.pairs),
            ("diagnostics", "seed", args.seed),
        ])
        self.run_dir = args.run
        self.layer = args.layer
        try:
            if self.run_dir:
                self.config = run_files.run_config(self.run_dir, self.config_path, self.overrides + flags)
            else:
                self.config = settings.load_config(self.config_path, self.overrides + flags)
        except StarError as e:
            self.error_message = str(e)
            self.exit_code = e.exit_code

    def retrieveOutput(self):
        """
        Builds augmented pairs from the dataset images and measures the token change rate.
        With a run, also the feature cosine at matched positions; the record is saved as
        invariance.json in the run.
        """
        if self.error_message:
            return
        try:
            diag = self.config["diagnostics"]
            model = None
            if self.run_dir:
                model, model_config, dataset, _ = run_files.load_trained_model(self.run_dir, self.config)
                self.layer = self.layer or model_config.tap_depth
            else:
                dataset = run_files.Dataset(self.config["data"]["dir"])
            pairs = invariance_pairs(dataset.images(), diag.getint("pairs"), diag.getint("seed"))
            self.record = view_invariance(pairs, dataset.codebook, dataset.patch_side, model, self.layer)
            self.record.update({"pairs": len(pairs), "layer": self.layer})
            if self.run_dir:
                run_files.save_json(os.path.join(self.run_dir, INVARIANCE_FILE), self.record)
        except StarError as e:
            self.error_message = f"Error measuring view invariance: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the token change rate and, with a run, the feature cosine."""
        if self.error_message:
            print(self.error_message)
        elif self.record:
            print(f"View invariance over {self.record['pairs']} augmented pairs")
            print(f"Token change rate: {self.record['token_change_rate']:.4f}")
            if self.record["feature_cosine"] is not None:
                print(f"Feature cosine (layer {self.record['layer']}): {self.record['feature_cosine']:.4f}")
        else:
            print("No output to display.")
