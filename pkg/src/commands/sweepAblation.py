# sweepAblation.py
import argparse
import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor

from ..config import settings
from ..core.diagnostics import summarize_profile
from ..core.errors import StarError, UsageError
from . import run_files
from .attentionLocality import attentionLocality
from .trainModel import BASELINE_OVERRIDES, trainModel
from .viewInvariance import viewInvariance

logger = logging.getLogger(__name__)

SWEEP_FILE = "sweep.csv"
SWEEP_FIELDS = ("axis", "value", "run", "exit_code", "step", "l_ar", "l_mim", "l_step", "l_view", "total",
                "mean_distance", "mass_elsewhere", "token_change_rate", "feature_cosine")

LOSS_SETTINGS = {
    "none": (False, False, False),
    "mim": (True, False, False),
    "mim+step": (True, True, False),
    "mim+view": (True, False, True),
    "mim+step+view": (True, True, True),
}

DEFAULT_VALUES = {
    "mask_ratio": ["0.15", "0.25", "0.35", "0.45"],
    "tap_depth": ["0.25", "0.5", "0.75", "1"],  # fractions of model.layers
    "k_steps": ["2", "4", "8", "16"],
    "losses": list(LOSS_SETTINGS),
}


def axis_overrides(axis, value, layers):
    """Config overrides that put one sweep member at `value` on `axis`."""
    if axis == "mask_ratio":
        return [("model", "mask_ratio", str(float(value)))]
    if axis == "tap_depth":
        depth = max(1, int(round(float(value) * layers)))
        return [("model", "tap_depth", str(depth))]
    if axis == "k_steps":
        return [("loss", "k_steps", str(int(value)))]
    if axis == "losses":
        if value not in LOSS_SETTINGS:
            raise UsageError(f"unknown loss configuration '{value}', expected one of {sorted(LOSS_SETTINGS)}")
        mim, step, view = LOSS_SETTINGS[value]
        # the "none" row is the plain next-token reference: no losses and no masking
        extra = list(BASELINE_OVERRIDES) if value == "none" else []
        return extra + [("loss", "use_mim", str(mim).lower()), ("loss", "use_step", str(step).lower()),
                        ("loss", "use_view", str(view).lower())]
    raise UsageError(f"unknown sweep axis '{axis}', expected one of {sorted(DEFAULT_VALUES)}")


def _run_command(command, args):
    command.getInput(args)
    command.retrieveOutput()
    return command


def run_member(job):
    """Trains one sweep member and measures it; returns its row of the combined table."""
    row = {"axis": job["axis"], "value": job["value"], "run": job["run_dir"]}
    train = _run_command(trainModel(job["config_path"], job["overrides"]), argparse.Namespace(
        star=True, baseline=False, resume=False, out=job["run_dir"], data=None, steps=None, seed=None))
    row["exit_code"] = train.exit_code
    if train.error_message:
        logger.error("sweep member %s: %s", job["run_dir"], train.error_message)
        return row
    if train.records:
        last = train.records[-1]
        row.update(step=last.step, l_ar=last.l_ar, l_mim=last.l_mim, l_step=last.l_step,
                   l_view=last.l_view, total=last.total)

    attn = _run_command(attentionLocality(), argparse.Namespace(run=job["run_dir"], traces=job["traces"]))
    if attn.profile is not None:
        summary = summarize_profile(attn.profile)
        row.update(mean_distance=summary["mean_distance"], mass_elsewhere=summary["mass_elsewhere"])
    invariance = _run_command(viewInvariance(), argparse.Namespace(
        run=job["run_dir"], data=None, pairs=job["pairs"], layer=None, seed=None))
    if invariance.record is not None:
        row.update(token_change_rate=invariance.record["token_change_rate"],
                   feature_cosine=invariance.record["feature_cosine"])
    row["exit_code"] = max(attn.exit_code, invariance.exit_code)
    return row


class sweepAblation:
    def __init__(self, config_path=None, overrides=()):
        """
        :param config_path: Optional user INI file, the base of every member run.
        :param overrides: 'section.key=value' strings from --set, applied to every member.
        """
        self.config_path = config_path
        self.overrides = list(overrides)
        self.config = None
        self.axis = None
        self.values = None
        self.out_dir = None
        self.jobs = 1
        self.traces = None
        self.pairs = None
        self.rows = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--axis", required=True, choices=sorted(DEFAULT_VALUES), help="ablation axis")
        parser.add_argument("--values", help="comma-separated values (default: the standard grid of the axis)")
        parser.add_argument("--out", required=True, help="sweep directory; must be new or empty")
        parser.add_argument("--jobs", type=int, default=1, help="member runs trained at once (default 1)")
        parser.add_argument("--traces", type=int, help="sequences traced per member (diagnostics.traces)")
        parser.add_argument("--pairs", type=int, help="augmented pairs per member (diagnostics.pairs)")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Trains one run per value of an ablation axis (mask_ratio, tap_depth, k_steps or\n"
            "losses), measures each, and writes the combined table.\n\n"
            "Output: one run directory per value plus sweep.csv and manifest.json in --out."
        )

    def getInput(self, args):
        """
        Takes the axis, its values and the sweep directory.

        :param args: Parsed flags (axis, values, out, jobs, traces, pairs).
        """
        self.axis = args.axis
        self.values = [v.strip() for v in args.values.split(",")] if args.values else DEFAULT_VALUES[args.axis]
        self.out_dir = args.out
        self.jobs = max(1, args.jobs)
        self.traces = args.traces
        self.pairs = args.pairs
        try:
            self.config = settings.load_config(self.config_path, self.overrides)
        except StarError as e:
            self.error_message = str(e)
            self.exit_code = e.exit_code

    def _jobs(self):
        layers = self.config["model"].getint("layers")
        jobs, seen = [], set()
        for value in self.values:
            run_dir = os.path.join(self.out_dir, f"{self.axis}_{value.replace('+', '_')}")
            if run_dir in seen:
                raise UsageError(f"value '{value}' appears twice; runs would share {run_dir}")
            seen.add(run_dir)
            extra = run_files.flag_overrides([("diagnostics", "traces", self.traces),
                                              ("diagnostics", "pairs", self.pairs)])
            jobs.append({
                "axis": self.axis,
                "value": value,
                "run_dir": run_dir,
                "config_path": self.config_path,
                "overrides": self.overrides + extra + axis_overrides(self.axis, value, layers),
                "traces": self.traces,
                "pairs": self.pairs,
            })
        return jobs

    def retrieveOutput(self):
        """
        Trains and measures one member run per value, in parallel processes when jobs > 1,
        then writes sweep.csv. The exit code is the worst member exit code.
        """
        if self.error_message:
            return
        try:
            jobs = self._jobs()
            run_files.fresh_directory(self.out_dir)
            run_files.write_manifest(self.out_dir, "sweep", self.config, {
                "table": SWEEP_FILE,
                "runs": [job["run_dir"] for job in jobs],
            }, extra={"axis": self.axis, "values": self.values, "jobs": self.jobs})
            if self.jobs > 1:
                with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                    self.rows = list(pool.map(run_member, jobs))
            else:
                self.rows = [run_member(job) for job in jobs]
            with open(os.path.join(self.out_dir, SWEEP_FILE), "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS, lineterminator="\n")
                writer.writeheader()
                for row in self.rows:
                    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            self.exit_code = max([row["exit_code"] for row in self.rows] + [0])
            if self.exit_code:
                self.error_message = "Some sweep members failed; see sweep.csv."
        except StarError as e:
            self.error_message = f"Error running the sweep: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the sweep table."""
        if self.rows:
            print(f"Sweep over {self.axis}: {len(self.rows)} runs in {self.out_dir}")
            print(f"{'value':>14}  {'l_ar':>8}  {'total':>8}  {'distance':>8}  {'cosine':>8}")
            for row in self.rows:
                def fmt(key):
                    value = row.get(key)
                    return f"{value:8.4f}" if isinstance(value, float) else f"{'-':>8}"
                print(f"{row['value']:>14}  {fmt('l_ar')}  {fmt('total')}  {fmt('mean_distance')}  {fmt('feature_cosine')}")
        if self.error_message:
            print(self.error_message)
        elif not self.rows:
            print("No output to display.")
