# probeSteps.py
import logging
import os

import numpy as np

from ..config import settings
from ..core import seeding
from ..core.diagnostics import probe_per_step, probe_to_dict
from ..core.errors import StarError
from . import run_files

logger = logging.getLogger(__name__)

PROBE_FILE = "probe.json"


class probeSteps:
    def __init__(self, config_path=None, overrides=()):
        """
        :param config_path: Optional INI file replacing the run's own config.ini.
        :param overrides: 'section.key=value' strings from --set.
        """
        self.config_path = config_path
        self.overrides = list(overrides)
        self.config = None
        self.run_dir = None
        self.permute_labels = False
        self.limit = None
        self.report = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--run", required=True, help="training run directory")
        parser.add_argument("--layer", type=int, help="1-indexed layer to probe, 0 = model.tap_depth (probe.layer)")
        parser.add_argument("--epochs", type=int, help="probe training epochs (probe.epochs)")
        parser.add_argument("--steps", help="comma-separated 1-indexed steps (probe.steps)")
        parser.add_argument("--seed", type=int, help="split and init seed (probe.seed)")
        parser.add_argument("--limit", type=int, help="probe only the first N sequences of the dataset")
        parser.add_argument("--permute-labels", action="store_true",
                            help="shuffle the labels first (chance-level leakage check)")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Trains one linear classifier per selected step on frozen features of one layer,\n"
            "with the class condition replaced by the null condition.\n\n"
            "Output: probe.json in the run directory with top-1 accuracy per step."
        )

    def getInput(self, args):
        """
        Takes the run directory and the probe options.

        :param args: Parsed flags (run, layer, epochs, steps, seed, limit, permute_labels).
        """
        flags = run_files.flag_overrides([
            ("probe", "layer", args.layer),
            ("probe", "epochs", args.epochs),
            ("probe", "steps", args.steps),
            ("probe", "seed", args.seed),
        ])
        self.run_dir = args.run
        self.permute_labels = args.permute_labels
        self.limit = args.limit
        try:
            self.config = run_files.run_config(self.run_dir, self.config_path, self.overrides + flags)
        except StarError as e:
            self.error_message = str(e)
            self.exit_code = e.exit_code

    def retrieveOutput(self):
        """
        Fits one linear classifier per requested step on frozen null-condition features
        of the run's model. With --permute-labels the labels are shuffled first.
        The report is saved as probe.json in the run.
        """
        if self.error_message:
            return
        try:
            model, _, dataset, _ = run_files.load_trained_model(self.run_dir, self.config)
            options = settings.probe_config(self.config)
            sequences = dataset.sequences[:self.limit] if self.limit else dataset.sequences
            labels = None
            if self.permute_labels:
                rng = seeding.numpy_rng(options["seed"], seeding.PROBE, "permute")
                labels = rng.permutation(np.asarray([s.condition for s in sequences]))
            self.report = probe_per_step(model, sequences, labels=labels, **options)
            payload = probe_to_dict(self.report)
            payload["permuted_labels"] = self.permute_labels
            run_files.save_json(os.path.join(self.run_dir, PROBE_FILE), payload)
        except StarError as e:
            self.error_message = f"Error probing: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the held-out accuracy per step next to chance."""
        if self.error_message:
            print(self.error_message)
        elif self.report:
            r = self.report
            print(f"Linear probe, layer {r.layer}, {r.epochs} epochs, "
                  f"{r.train_size} train / {r.test_size} test (chance {r.chance:.3f})")
            print(f"{'step':>6}  {'accuracy':>8}")
            for s in r.steps:
                print(f"{s:>6}  {r.accuracies[s]:>8.4f}")
        else:
            print("No output to display.")
