"""``pipeline <subcommand> --config <path> [--out <dir>] [--preset NAME]``

Exit codes: 0 success, 1 input or configuration error, 2 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings

from .errors import LatentRiskError, StalenessWarning
from .pipeline import STAGES, PipelineConfig, run_all, run_stage

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipeline", description="Latent-source risk modelling pipeline.")
    p.add_argument("subcommand", choices=[*STAGES, "all"])
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", default=None, help="output directory (overrides the config's 'out')")
    p.add_argument("--preset", default=None, choices=["cryptogenic", "cryptogenic-reference", "general-is"], help="label criteria preset")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    warnings.simplefilter("always", StalenessWarning)
    try:
        config = PipelineConfig.load(args.config, args.out, args.preset)
        if args.subcommand == "all":
            run_all(config)
        else:
            run_stage(config, args.subcommand)
    except (LatentRiskError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
