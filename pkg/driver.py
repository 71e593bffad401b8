# driver.py
import argparse
import json
import logging
import sys

import torch

from src.commands.Command_Interaction import Command_Interaction
from src.config import settings
from src.core.errors import StarError


def load_config(config_path=None, overrides=()):
    # Defaults live in src/config/star_config.ini; a user file and --set only change existing keys
    return settings.load_config(config_path, overrides)


def build_parser(handler):
    parser = argparse.ArgumentParser(
        prog="driver.py",
        description="Self-guided training and diagnostics for a class-conditional token decoder.")
    parser.add_argument("--config", help="user INI file layered over src/config/star_config.ini")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--help-json", action="store_true", help="print every flag of every command as JSON")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    handler.addArguments(subparsers)
    return parser, subparsers


def _flags(parser):
    flags = []
    for action in parser._actions:
        if isinstance(action, (argparse._HelpAction, argparse._SubParsersAction)):
            continue
        flags.append({
            "flags": list(action.option_strings) or [action.dest],
            "dest": action.dest,
            "help": action.help,
            "default": action.default,
            "required": bool(action.required),
            "type": getattr(action.type, "__name__", None),
            "choices": list(action.choices) if action.choices else None,
        })
    return flags


def help_json(parser, subparsers):
    """Machine-readable flag reference of the driver and every subcommand."""
    return {
        "global": _flags(parser),
        "commands": {
            name: {"description": sub.description, "flags": _flags(sub)}
            for name, sub in subparsers.choices.items()
        },
    }


def main(argv=None):
    handler = Command_Interaction()
    parser, subparsers = build_parser(handler)
    args = parser.parse_args(argv)

    if args.help_json:
        print(json.dumps(help_json(parser, subparsers), indent=2, default=str))
        return 0
    if not args.command:
        parser.print_help()
        return 2

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    # Validate the configuration once up front so a bad --set fails before any work
    try:
        config = load_config(args.config, args.set)
    except StarError as e:
        print(f"Configuration error: {e}")
        return e.exit_code
    threads = config["run"].getint("threads")
    if threads > 0:
        torch.set_num_threads(threads)

    handler.config_path = args.config
    handler.overrides = list(args.set)
    return handler.execute_command(args.command, args)


# For executing the module directly
if __name__ == "__main__":
    sys.exit(main())
