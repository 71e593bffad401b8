# compareRuns.py
import logging
import os

from ..core.diagnostics import compare_runs
from ..core.errors import StarError
from . import run_files
from .attentionLocality import LOCALITY_FILE
from .probeSteps import PROBE_FILE
from .viewInvariance import INVARIANCE_FILE

logger = logging.getLogger(__name__)

COMPARE_FILE = "compare.json"


def run_summary(run_dir):
    """Whatever diagnostics have been written into a run directory, in compare_runs form."""
    summary = {}
    locality = os.path.join(run_dir, LOCALITY_FILE)
    if os.path.exists(locality):
        summary["locality"] = run_files.load_json(locality)["summary"]
    probe = os.path.join(run_dir, PROBE_FILE)
    if os.path.exists(probe):
        summary["probe"] = {int(s): a for s, a in run_files.load_json(probe)["accuracies"].items()}
    invariance = os.path.join(run_dir, INVARIANCE_FILE)
    if os.path.exists(invariance):
        summary["invariance"] = run_files.load_json(invariance)
    return summary


class compareRuns:
    def __init__(self, config_path=None, overrides=()):
        self.baseline_dir = None
        self.star_dir = None
        self.out_path = None
        self.verdicts = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--baseline", required=True, help="baseline run directory")
        parser.add_argument("--star", required=True, help="run trained with all four losses")
        parser.add_argument("--out", help="verdict file (default: <star>/compare.json)")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Compares the diagnostics of a baseline run and a run trained with all four losses\n"
            "(attention distance, mass outside the neighbourhood, probe accuracy, feature cosine).\n\n"
            "Run attn, probe and invariance on both runs first."
        )

    def getInput(self, args):
        """
        Takes the two run directories and where to write the verdicts.

        :param args: Parsed flags (baseline, star, out).
        """
        self.baseline_dir = args.baseline
        self.star_dir = args.star
        self.out_path = args.out or os.path.join(args.star, COMPARE_FILE)

    def retrieveOutput(self):
        """
        Reads the diagnostics saved in both runs and evaluates each directional claim
        the two runs can both answer. Sets an error message when they share none.
        """
        try:
            baseline, star = run_summary(self.baseline_dir), run_summary(self.star_dir)
            self.verdicts = compare_runs(baseline, star)
            if not self.verdicts:
                self.error_message = "No diagnostics in common between the two runs; run attn, probe or invariance first."
                return
            run_files.save_json(self.out_path, {
                "baseline": self.baseline_dir,
                "star": self.star_dir,
                "verdicts": self.verdicts,
            })
        except StarError as e:
            self.error_message = f"Error comparing runs: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays one line per claim with both values and whether it holds."""
        if self.error_message:
            print(self.error_message)
        elif self.verdicts:
            for v in self.verdicts:
                print(f"[{'holds' if v['holds'] else 'fails'}] {v['claim']}: baseline {v['baseline']}, star {v['star']}")
            print(f"Verdicts written to {self.out_path}")
        else:
            print("No output to display.")
