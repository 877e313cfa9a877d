"""Command-line entry point.

Subcommands map one-to-one onto the experiment drivers; each reads an INI
config (shipped defaults under ccgflow/configs) and writes CSV/VTK artifacts
into --out.  --threads caps BLAS/OpenMP pools and must act before numpy is
imported, hence the lazy imports below.
"""

from __future__ import annotations

import argparse
import os
import sys

_COMMANDS = ("mms-convergence", "five-spot", "lens", "raster", "nnz-report",
             "matrix-1d")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccgflow",
        description="Cell-centered Galerkin experiments for miscible "
                    "displacement in porous media.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", metavar="PATH",
                       help="INI config file (default: the shipped config "
                            "of the same name)")
        p.add_argument("--out", metavar="DIR", default="out",
                       help="output directory (default: ./out)")
        p.add_argument("--mesh-file", metavar="PATH", default=None,
                       help="override the mesh file referenced by the config")
        p.add_argument("--threads", metavar="N", type=int, default=None,
                       help="cap BLAS/OpenMP thread pools")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return 2
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from . import experiments
    from .config import ConfigError, builtin_config_path, load_config

    driver = getattr(experiments, "cmd_" + args.command.replace("-", "_"))
    try:
        path = args.config or builtin_config_path(
            args.command.replace("-", "_"))
        cfg = load_config(path)
        driver(cfg, args.out, mesh_file=args.mesh_file)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
