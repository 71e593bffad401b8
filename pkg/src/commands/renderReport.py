# renderReport.py
import logging
import os

from ..core.diagnostics import probe_from_dict, profile_from_dict, render_report
from ..core.errors import StarError
from . import run_files
from .attentionLocality import LOCALITY_FILE
from .probeSteps import PROBE_FILE
from .viewInvariance import INVARIANCE_FILE

logger = logging.getLogger(__name__)


class renderReport:
    def __init__(self, config_path=None, overrides=()):
        self.runs = []
        self.out_dir = None
        self.written = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--runs", nargs="+", required=True, help="run directories; each is named by its basename")
        parser.add_argument("--out", required=True, help="report directory")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Collects the locality, probe and invariance results of one or more runs into CSV\n"
            "tables and SVG charts (one attention heatmap per layer and run)."
        )

    def getInput(self, args):
        """:param args: Parsed flags (runs, out)."""
        self.runs = list(args.runs)
        self.out_dir = args.out

    def retrieveOutput(self):
        """
        Gathers whatever diagnostics each run holds and renders the CSV tables and SVG charts.
        Runs without a given diagnostic are left out of its table.
        """
        try:
            profiles, probes, invariances = {}, {}, {}
            for run_dir in self.runs:
                name = os.path.basename(os.path.normpath(run_dir))
                path = os.path.join(run_dir, LOCALITY_FILE)
                if os.path.exists(path):
                    profiles[name] = profile_from_dict(run_files.load_json(path))
                path = os.path.join(run_dir, PROBE_FILE)
                if os.path.exists(path):
                    probes[name] = probe_from_dict(run_files.load_json(path))
                path = os.path.join(run_dir, INVARIANCE_FILE)
                if os.path.exists(path):
                    record = run_files.load_json(path)
                    invariances[name] = {"token_change_rate": record["token_change_rate"],
                                         "feature_cosine": record.get("feature_cosine")}
            self.written = render_report(profiles, probes, invariances, self.out_dir)
        except OSError as e:
            self.error_message = f"Cannot write the report to {self.out_dir}: {e}"
            self.exit_code = 1
        except StarError as e:
            self.error_message = f"Error rendering the report: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the files written."""
        if self.error_message:
            print(self.error_message)
        elif self.written:
            print(f"Report written to {self.out_dir}:")
            for path in self.written:
                print(f"  {os.path.basename(path)}")
        else:
            print("No output to display.")
