# attentionLocality.py
import logging
import os

from ..core.diagnostics import attention_locality, collect_traces, profile_to_dict, summarize_profile
from ..core.errors import StarError
from . import run_files

logger = logging.getLogger(__name__)

LOCALITY_FILE = "locality.json"


class attentionLocality:
    def __init__(self, config_path=None, overrides=()):
        """
        :param config_path: Optional INI file replacing the run's own config.ini.
        :param overrides: 'section.key=value' strings from --set.
        """
        self.config_path = config_path
        self.overrides = list(overrides)
        self.config = None
        self.run_dir = None
        self.profile = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--run", required=True, help="training run directory")
        parser.add_argument("--traces", type=int, help="number of dataset sequences traced (diagnostics.traces)")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Records full attention maps on dataset sequences and splits every query's mass into\n"
            "the condition, the grid neighbours of the predicted token and everything else.\n\n"
            "Output: locality.json in the run directory."
        )

    def getInput(self, args):
        """
        Takes the run directory and the number of traces to collect.

        :param args: Parsed flags (run, traces).
        """
        flags = run_files.flag_overrides([("diagnostics", "traces", args.traces)])
        self.run_dir = args.run
        try:
            self.config = run_files.run_config(self.run_dir, self.config_path, self.overrides + flags)
        except StarError as e:
            self.error_message = str(e)
            self.exit_code = e.exit_code

    def retrieveOutput(self):
        """
        Runs the trained model over the first diagnostics.traces sequences with full traces
        and buckets the attention mass of every layer by grid distance.
        The profile is saved as locality.json in the run.
        """
        if self.error_message:
            return
        try:
            model, model_config, dataset, _ = run_files.load_trained_model(self.run_dir, self.config)
            count = self.config["diagnostics"].getint("traces")
            traces = collect_traces(model, dataset.sequences[:count])
            self.profile = attention_locality(traces, model_config.grid_width)
            run_files.save_json(os.path.join(self.run_dir, LOCALITY_FILE), profile_to_dict(self.profile))
        except StarError as e:
            self.error_message = f"Error measuring attention locality: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the per-layer locality summary."""
        if self.error_message:
            print(self.error_message)
        elif self.profile:
            p = self.profile
            print(f"Attention locality over {p.traces} sequences")
            print(f"{'layer':>5}  {'condition':>9}  {'neighbors':>9}  {'elsewhere':>9}  {'distance':>8}")
            for layer in range(p.layers):
                print(f"{layer + 1:>5}  {p.mass_on_condition[layer, 1:].mean():>9.4f}  "
                      f"{p.mass_on_neighbors[layer, 1:].mean():>9.4f}  "
                      f"{p.mass_elsewhere[layer, 1:].mean():>9.4f}  {p.mean_distance[layer, 1:].mean():>8.3f}")
            summary = summarize_profile(p)
            print(f"Final layer: mean distance {summary['mean_distance']:.3f}, "
                  f"mass elsewhere {summary['mass_elsewhere']:.4f}")
        else:
            print("No output to display.")
