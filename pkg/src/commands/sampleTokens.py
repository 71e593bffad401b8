# sampleTokens.py
import logging
import os

from ..config import settings
from ..core.data_toy import dequantize, save_png
from ..core.errors import StarError
from ..core.sampler import generate_batch
from ..storage import token_store
from . import run_files

logger = logging.getLogger(__name__)

SAMPLES_FILE = "samples.startok"


class sampleTokens:
    def __init__(self, config_path=None, overrides=()):
        """
        :param config_path: Optional INI file replacing the run's own config.ini.
        :param overrides: 'section.key=value' strings from --set.
        """
        self.config_path = config_path
        self.overrides = list(overrides)
        self.config = None
        self.run_dir = None
        self.out_dir = None
        self.write_png = True
        self.samples = None
        self.error_message = None
        self.exit_code = 0

    @classmethod
    def addArguments(cls, parser):
        parser.add_argument("--run", required=True, help="training run directory holding checkpoint.ckpt")
        parser.add_argument("--class", dest="class_label", type=int, help="class to sample (sample.class)")
        parser.add_argument("--count", type=int, help="number of sequences (sample.count)")
        parser.add_argument("--cfg-scale", type=float, help="guidance scale s >= 1 (sample.cfg_scale)")
        parser.add_argument("--temperature", type=float, help="sampling temperature (sample.temperature)")
        parser.add_argument("--top-k", type=int, help="logits kept before sampling, 0 = all (sample.top_k)")
        parser.add_argument("--seed", type=int, help="sampling seed (sample.seed)")
        parser.add_argument("--out", help="output directory (default: <run>/samples)")
        parser.add_argument("--no-png", action="store_true", help="skip the de-quantized PNG renderings")

    def getDescription(self):
        """Returns a description of what this command does."""
        return (
            "Decodes token sequences for one class with classifier-free guidance, temperature\n"
            "and top-k.\n\n"
            "Output: samples.startok plus one PNG per sample painted from the codebook colours."
        )

    def getInput(self, args):
        """
        Takes the run directory, the sampling options and the output directory.

        :param args: Parsed flags (run, class_label, count, cfg_scale, temperature, top_k, seed, out, no_png).
        """
        flags = run_files.flag_overrides([
            ("sample", "class", args.class_label),
            ("sample", "count", args.count),
            ("sample", "cfg_scale", args.cfg_scale),
            ("sample", "temperature", args.temperature),
            ("sample", "top_k", args.top_k),
            ("sample", "seed", args.seed),
        ])
        self.run_dir = args.run
        self.out_dir = args.out or os.path.join(args.run, "samples")
        self.write_png = not args.no_png
        try:
            self.config = run_files.run_config(self.run_dir, self.config_path, self.overrides + flags)
        except StarError as e:
            self.error_message = str(e)
            self.exit_code = e.exit_code

    def retrieveOutput(self):
        """
        Restores the trained model and generates sample.count token sequences for one class.
        Writes samples.startok and, unless --no-png, one de-quantized PNG per sample.
        """
        if self.error_message:
            return
        try:
            model, model_config, dataset, _ = run_files.load_trained_model(self.run_dir, self.config)
            sample_cfg = settings.sample_config(self.config)
            class_label = self.config["sample"].getint("class")
            self.samples = generate_batch(model, model_config, class_label, sample_cfg)

            os.makedirs(self.out_dir, exist_ok=True)
            token_store.write_tokens(os.path.join(self.out_dir, SAMPLES_FILE), self.samples,
                                     model_config.vocab_size, model_config.seq_len, model_config.num_classes)
            if self.write_png:
                for i, seq in enumerate(self.samples):
                    pixels = dequantize(seq, dataset.codebook, dataset.patch_side)
                    save_png(pixels, os.path.join(self.out_dir, f"sample_{class_label}_{i:03d}.png"))
        except StarError as e:
            self.error_message = f"Error sampling: {e}"
            self.exit_code = e.exit_code

    def displayOutput(self):
        """Displays the output directory and the first tokens of every sample."""
        if self.error_message:
            print(self.error_message)
        elif self.samples:
            print(f"Wrote {len(self.samples)} samples to {self.out_dir}")
            for i, seq in enumerate(self.samples):
                head = " ".join(str(t) for t in seq.tokens[:12])
                print(f"  {i:3d}: {head} ...")
        else:
            print("No output to display.")
