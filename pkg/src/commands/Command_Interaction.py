# Command_Interaction.py (part of driver)
import logging

# Commands
from .makeData import makeData
from .trainModel import trainModel
from .sampleTokens import sampleTokens
from .probeSteps import probeSteps
from .attentionLocality import attentionLocality
from .viewInvariance import viewInvariance
from .gradientCheck import gradientCheck
from .sweepAblation import sweepAblation
from .compareRuns import compareRuns
from .renderReport import renderReport

logger = logging.getLogger(__name__)

# Subcommand name -> command class, in the order --help lists them
COMMANDS = {
    "make-data": makeData,
    "train": trainModel,
    "sample": sampleTokens,
    "probe": probeSteps,
    "attn": attentionLocality,
    "invariance": viewInvariance,
    "gradcheck": gradientCheck,
    "sweep": sweepAblation,
    "compare": compareRuns,
    "report": renderReport,
}


class Command_Interaction:
    def __init__(self, config_path=None, overrides=()):
        # User configuration file and --set overrides, handed to every command
        self.config_path = config_path
        self.overrides = list(overrides)
        self.command_classes = dict(COMMANDS)

    def addArguments(self, subparsers):
        """
        Registers one subparser per command and lets each command class declare its flags.
        This should be called once while the driver builds its argument parser.
        """
        for name, command_class in self.command_classes.items():
            description = command_class().getDescription()
            parser = subparsers.add_parser(name, help=description.splitlines()[0], description=description)
            command_class.addArguments(parser)
            parser.set_defaults(command=name)

    def execute_command(self, command_name, args):
        """Runs the command's lifecycle and returns its exit code."""
        if command_name not in self.command_classes:
            print(f"Error: command '{command_name}' not found.")
            return 2

        command = self.command_classes[command_name](self.config_path, self.overrides)
        logger.debug("%s: %s", command_name, command.getDescription().splitlines()[0])

        command.getInput(args)
        command.retrieveOutput()
        command.displayOutput()
        return command.exit_code
