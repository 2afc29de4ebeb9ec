"""
Subcommand registry
Handlers register on a CommandRouter; the CLI includes routers and builds argparse subparsers from them
"""

import argparse
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

Handler = Callable[[argparse.Namespace], Dict[str, Any]]


@dataclass(frozen=True)
class Argument:
    """Positional args and keyword options forwarded to ArgumentParser.add_argument"""

    flags: Tuple[str, ...]
    options: Dict[str, Any] = field(default_factory=dict)


def argument(*flags: str, **options: Any) -> Argument:
    return Argument(flags=flags, options=options)


@dataclass(frozen=True)
class Command:
    name: str
    handler: Handler
    help: str = ""
    arguments: Tuple[Argument, ...] = ()


class CommandRouter:
    def __init__(self):
        self.commands: Dict[str, Command] = {}

    def command(self, name: str, help: str = "", arguments: Optional[List[Argument]] = None):
        """Register the decorated function as subcommand `name`"""

        def decorator(handler: Handler) -> Handler:
            if name in self.commands:
                raise ValueError(f"Command {name} registered twice")
            self.commands[name] = Command(name, handler, help, tuple(arguments or ()))
            return handler

        return decorator

    def include_router(self, other: "CommandRouter") -> None:
        for command in other.commands.values():
            if command.name in self.commands:
                raise ValueError(f"Command {command.name} registered twice")
            self.commands[command.name] = command

    def add_subparsers(self, parser: argparse.ArgumentParser, parents: List[argparse.ArgumentParser]) -> None:
        subparsers = parser.add_subparsers(dest="command", required=True)
        for command in self.commands.values():
            sub = subparsers.add_parser(command.name, help=command.help, parents=parents)
            for arg in command.arguments:
                sub.add_argument(*arg.flags, **arg.options)
            sub.set_defaults(handler=command.handler)
