# trainModel.py
import logging
import os

from ..config import settings
from ..core.errors import StarError, UsageError
from ..core.model import build_model, params_checksum
from ..core.trainer import new_train_state, run_training
from ..storage import checkpoint_store
from . import run_files

logger = logging.getLogger(__name__)

# alpha = beta = 0 and r = 0: plain next-token prediction
BASELINE_OVERRIDES = (("loss", "alpha", "0.0"), ("loss", "beta", "0.0"), ("model", "mask_ratio", "0.0"))


def save_state(path, state):
    checkpoint_store.save_checkpoint(path, state.student, state.teacher, state.optimizer,
                                     state.step, state.model_config)


class trainModel:
    def __init__(self, config_path=None, overrides=()):
        """
        :param config_path: Optional user INI file.
        :param overrides: 'section.key=value' strings from --set.
        """
        self.config_path = config_path
        self.overrides = list(overrides)
        self.config = None
        self.run_dir = None
        self.resume = False
        self.records = []
        self.result = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        mode = parser.add_mutually_exclusive_group()
        mode.add_argument("--star", action="store_true", help="train with all four losses (default)")
        mode.add_argument("--baseline", action="store_true",
                          help="next-token prediction only (alpha = beta = 0, no attention masking)")
        parser.add_argument("--resume", action="store_true", help="continue the run in --out from its checkpoint")
        parser.add_argument("--out", help="run directory (run.out)")
        parser.add_argument("--data", help="dataset directory (data.dir)")
        parser.add_argument("--steps", type=int, help="total optimizer steps (train.steps)")
        parser.add_argument("--seed", type=int, help="training seed (train.seed)")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Trains the decoder on the token dataset.\n\n"
            "--star adds masked-feature alignment and the two contrastive losses against the EMA\n"
            "teacher; --baseline trains next-token prediction alone.\n\n"
            "Output: config.ini, manifest.json, metrics.jsonl, checkpoint.ckpt and finished.json\n"
            "in the run directory."
        )

    def getInput(self, args):
        """
        Resolves the run configuration. --baseline forces alpha = beta = 0 and no masking;
        --resume reads the configuration saved in the run.

        :param args: Parsed flags (star, baseline, resume, out, data, steps, seed).
        """
        flags = run_files.flag_overrides([
            ("data", "dir", args.data),
            ("train", "steps", args.steps),
            ("train", "seed", args.seed),
        ])
        if args.baseline:
            flags += list(BASELINE_OVERRIDES)
        self.resume = bool(args.resume)
        try:
            if self.resume:
                if not args.out:
                    raise UsageError("--resume needs --out pointing at an existing run")
                self.run_dir = args.out
                self.config = run_files.run_config(self.run_dir, self.config_path, self.overrides + flags)
            else:
                self.config = settings.load_config(self.config_path, self.overrides + flags)
                self.run_dir = args.out or self.config["run"]["out"]
            self.config.set("run", "out", self.run_dir)
        except StarError as e:
            self.error_message = str(e)
            self.exit_code = e.exit_code

    def retrieveOutput(self):
        """
        Builds student, teacher and optimizer, restores them on --resume, and trains to train.steps.

        A non-finite loss stops the run before the update; the last periodic checkpoint stays.
        """
        if self.error_message:
            return
        try:
            dataset = run_files.Dataset(self.config["data"]["dir"])
            model_config = dataset.model_config(self.config)
            train_config = settings.train_config(self.config)
            checkpoint_path = os.path.join(self.run_dir, run_files.CHECKPOINT_FILE)

            if self.resume:
                checkpoint = checkpoint_store.load_checkpoint(checkpoint_path)
            else:
                run_files.fresh_directory(self.run_dir)
                settings.write_config(self.config, os.path.join(self.run_dir, run_files.CONFIG_FILE))
                run_files.write_manifest(self.run_dir, "train", self.config, {
                    "config": run_files.CONFIG_FILE,
                    "metrics": run_files.METRICS_FILE,
                    "checkpoint": run_files.CHECKPOINT_FILE,
                    "dataset": dataset.data_dir,
                })

            student = build_model(model_config, seed=train_config.seed)
            state = new_train_state(student, model_config, train_config, dataset.codebook, dataset.patch_side)
            if self.resume:
                state.step = checkpoint_store.restore(checkpoint, model_config, student, state.teacher, state.optimizer)
                logger.info("resuming %s at step %d", self.run_dir, state.step)

            self.records = run_training(state, dataset.images(), self.run_dir, save_state)
            self.result = {
                "step": state.step,
                "params_sha256": params_checksum(student),
                "resumed": self.resume,
            }
            run_files.write_finished(self.run_dir, self.result)
        except StarError as e:
            self.error_message = f"Training stopped: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the run directory, the step reached and the final losses."""
        if self.error_message:
            print(self.error_message)
        elif self.result:
            print(f"Run directory: {self.run_dir}")
            print(f"Trained to step {self.result['step']} ({len(self.records)} steps this call)")
            if self.records:
                last = self.records[-1]
                print(f"Final losses: l_ar {last.l_ar:.4f}  l_mim {last.l_mim:.4f}  "
                      f"l_step {last.l_step:.4f}  l_view {last.l_view:.4f}  total {last.total:.4f}")
        else:
            print("No output to display.")
