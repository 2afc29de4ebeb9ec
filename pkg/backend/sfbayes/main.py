"""
Command-line entry point
Run from backend/: python -m sfbayes.main <command> [flags]
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from sfbayes.commands import CommandRouter
from sfbayes.commands.pipeline import router as pipeline_router
from sfbayes.config import settings
from sfbayes.exceptions import InputError, NumericalError, SfBayesError
from sfbayes.schemas import RunConfig
from sfbayes.utils.io import write_error

logger = logging.getLogger(__name__)

app = CommandRouter()
app.include_router(pipeline_router)


def common_flags() -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand; unset flags stay absent from the namespace"""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="Run config JSON")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Master seed")
    parser.add_argument("--bases", type=int, nargs="+", default=argparse.SUPPRESS, help="Basis counts to fit")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="Worker threads")
    parser.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="Output directory")
    return parser


def build_parser() -> argparse.ArgumentParser:
    common = common_flags()
    parser = argparse.ArgumentParser(
        prog=settings.APP_NAME,
        description="Bayesian spatial functional curves: simulate, fit, predict and report",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.VERSION}")
    app.add_subparsers(parser, parents=[common])
    return parser


def error_directory(args: argparse.Namespace) -> Path:
    """--out, else paths.output_dir of a readable --config, else the process default"""
    if getattr(args, "out", None):
        return Path(args.out)
    if getattr(args, "config", None):
        try:
            return Path(RunConfig.load(args.config).paths.output_dir)
        except SfBayesError:
            pass
    return Path(settings.OUTPUT_DIR)


def report_failure(command: str, error: SfBayesError, out_dir: Path) -> int:
    """Log, print the error JSON to stderr, mirror it to <out>/error.json and return the exit code"""
    logger.error(f"{command} failed: {error.message}")
    print(json.dumps(error.to_dict(), default=str), file=sys.stderr)
    write_error(error, out_dir)
    return error.exit_code


def main(argv: Optional[List[str]] = None) -> int:
    # Load environment variables from .env file
    load_dotenv()

    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)

    args = build_parser().parse_args(argv)
    logger.info(f"Running {args.command}")
    try:
        result = args.handler(args)
    except SfBayesError as e:
        return report_failure(args.command, e, error_directory(args))
    except (ValidationError, ValueError) as e:
        return report_failure(args.command, InputError(str(e)), error_directory(args))
    except (ArithmeticError, MemoryError) as e:
        return report_failure(args.command, NumericalError(str(e)), error_directory(args))

    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
