import argparse
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

from instance_retrieval.error import ConfigurationError, RetrievalPipelineError
from instance_retrieval.mapper import ArgumentMapper, function_summary
from instance_retrieval.utils import to_kebab_case

logger = logging.getLogger(__name__)

GLOBAL_DEST_PREFIX = "global_"


class ArgumentParser(argparse.ArgumentParser):
    """Reports bad arguments as a `ConfigurationError` instead of exiting with argparse's status 2."""

    def error(self, message: str):
        raise ConfigurationError(f"{self.prog}: {message}", extensions={"usage": self.format_usage().strip()})


def tag_value(
    value,
    app: Optional["CommandLineApp"] = None,
    meta: Optional[Dict] = None,
    name: Optional[str] = None,
    is_setup: bool = False,
):
    # Ensure each function has its own _commands dict, not an inherited one
    if "_commands" not in getattr(value, "__dict__", {}):
        value._commands = {}

    value._commands[app] = {
        "defined_on": value,
        "meta": meta or {},
        "name": name or to_kebab_case(value.__name__),
        "app": app,
    }

    if app is not None:
        if is_setup:
            app.setup = value
        else:
            app.add_command(value)

    return value


def build_decorator(arg1: Any, arg2: Any, name: Optional[str] = None, is_setup: bool = False):
    """
    Creates a decorator that tags a function as a command.

    :param arg1: Possibly a function, a dict of metadata, or a `CommandLineApp` instance.
    :param arg2: Possibly a function, a dict of metadata, or a `CommandLineApp` instance.
    :param name: Command name; defaults to the kebab-cased function name.
    :param is_setup: Whether the function builds the context every command receives.
    """
    func = arg1 if callable(arg1) else (arg2 if callable(arg2) else None)
    meta_dict = arg1 if isinstance(arg1, dict) else (arg2 if isinstance(arg2, dict) else None)
    app_obj = arg1 if isinstance(arg1, CommandLineApp) else (arg2 if isinstance(arg2, CommandLineApp) else None)

    # If a function is directly provided
    if func:
        return tag_value(value=func, app=app_obj, meta=meta_dict, name=name, is_setup=is_setup)

    # Otherwise, return a decorator
    def _decorator(f):
        return tag_value(value=f, app=app_obj, meta=meta_dict, name=name, is_setup=is_setup)

    return _decorator


class CommandLineApp:
    """
    A command line built from registered functions.

    Each command is a typed, documented function whose first parameter is the
    context returned by the setup function; its remaining parameters become
    the subcommand's arguments. The setup function's parameters become the
    global options.
    """

    def __init__(
        self,
        prog: Optional[str] = None,
        description: Optional[str] = None,
        commands: Optional[Sequence[Callable]] = None,
        setup: Optional[Callable] = None,
        mapper: Optional[ArgumentMapper] = None,
    ):
        self.prog = prog
        self.description = description
        self.setup = setup
        self.mapper = mapper or ArgumentMapper()
        self._commands: Dict[str, Callable] = {}
        for command in commands or []:
            self.add_command(command)

    def command(self, meta=None, name: Optional[str] = None):
        return build_decorator(self, meta, name=name)

    def setup_function(self, meta=None):
        return build_decorator(self, meta, is_setup=True)

    def add_command(self, function: Callable) -> None:
        if "_commands" not in getattr(function, "__dict__", {}):
            tag_value(function)
        name = self.command_meta(function)["name"]
        if name in self._commands and self._commands[name] is not function:
            raise ValueError(f"command '{name}' is already registered")
        self._commands[name] = function

    def command_meta(self, function: Callable) -> Dict[str, Any]:
        # noinspection PyProtectedMember
        tags = function._commands
        return tags.get(self) or tags.get(None) or next(iter(tags.values()))

    @property
    def commands(self) -> Dict[str, Callable]:
        return dict(self._commands)

    def parser(self) -> argparse.ArgumentParser:
        parser = ArgumentParser(prog=self.prog, description=self.description)
        if self.setup is not None:
            ArgumentMapper(skip=(), dest_prefix=GLOBAL_DEST_PREFIX).map_function(self.setup, parser)
        subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
        for name, function in self._commands.items():
            meta = self.command_meta(function)["meta"]
            summary = meta.get("help") or function_summary(function)
            subparser = subparsers.add_parser(name, help=summary, description=summary)
            self.mapper.map_function(function, subparser)
        return parser

    def run(self, argv: Optional[List[str]] = None) -> int:
        """
        Parse `argv`, build the context and run the chosen command.

        :return: Process exit code: 0 on success, the error's `exit_code` for
            pipeline errors (bad arguments are a configuration error).
        """
        name = "arguments"
        try:
            namespace = vars(self.parser().parse_args(argv))
            name = namespace.pop("command")
            global_args = {k[len(GLOBAL_DEST_PREFIX):]: namespace.pop(k) for k in list(namespace) if k.startswith(GLOBAL_DEST_PREFIX)}
            context = self.setup(**global_args) if self.setup is not None else None
            result = self._commands[name](context, **namespace)
        except RetrievalPipelineError as err:
            logger.error("%s failed: %s", name, err.message)
            print(json.dumps(err.to_record(), sort_keys=True, default=str), file=sys.stderr)
            return err.exit_code
        return 0 if result is None else int(result)
