# gradientCheck.py
import logging

from ..core.errors import StarError
from ..core.gradcheck import run_suite

logger = logging.getLogger(__name__)


class gradientCheck:
    # a failed check is a numeric failure
    FAILED_EXIT_CODE = 3

    def __init__(self, config_path=None, overrides=()):
        self.seed = 0
        self.max_coords = 24
        self.results = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--seed", type=int, default=0, help="seed for the micro model and check inputs")
        parser.add_argument("--max-coords", type=int, default=24,
                            help="coordinates probed per parameter tensor in the end-to-end check")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Compares autograd gradients with central differences for every loss and kernel\n"
            "on the micro configuration (L=2, D=16, T=8, B=2, M=2, K=2) in float64.\n\n"
            "Output: a summary table; exit code 3 if any check fails."
        )

    def getInput(self, args):
        """:param args: Parsed flags (seed, max_coords)."""
        self.seed = args.seed
        self.max_coords = args.max_coords

    def retrieveOutput(self):
        """Runs the finite-difference suite. Any failed check sets the numeric-failure exit code."""
        try:
            self.results = run_suite(self.seed, self.max_coords)
            if not all(r.passed for r in self.results):
                failed = ", ".join(r.name for r in self.results if not r.passed)
                self.error_message = f"Gradient check failed for: {failed}"
                self.exit_code = self.FAILED_EXIT_CODE
        except StarError as e:
            self.error_message = f"Gradient check aborted: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays one row per check with its worst relative error."""
        if self.results:
            print(f"{'check':<15}  {'max rel err':>11}  {'max abs err':>11}  {'coords':>6}  {'tol':>7}  result")
            for result in self.results:
                row = result.row()
                print(f"{row['check']:<15}  {row['max_rel_error']:>11.3e}  {row['max_abs_error']:>11.3e}  "
                      f"{row['coords']:>6}  {row['tolerance']:>7.0e}  {'ok' if row['passed'] else 'FAILED'}")
        if self.error_message:
            print(self.error_message)
        elif not self.results:
            print("No output to display.")
