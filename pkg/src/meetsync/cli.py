"""Command-line entry point.

Exit codes: 0 ok, 1 QC warnings, 2 fatal QC (or failed verify), 64 usage or
invalid configuration, 74 I/O failure. Progress goes to stderr; results go to
files under the session root.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, kernels
from .errors import ConfigurationError, NotASessionError, SessionExistsError, StructuralError, TSVParseError
from .packager import json_bytes, verify_session
from .pipeline import (
    PipelineConfig,
    align,
    config_from_root,
    package,
    quality_control,
    reslice,
    run_end_to_end,
    simulate,
)

EX_OK = 0
EX_USAGE = 64
EX_IOERR = 74

log = logging.getLogger("meetsync")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, with_config=True):
    if with_config:
        p.add_argument("--config", type=Path, help="pipeline config JSON (default: the one recorded in the root)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--tolerance-ms", type=float, dest="tolerance_ms", help="timing tolerance override in ms")
        p.add_argument("--method", choices=["theil_sen", "least_squares"], help="clock fit method override")
    p.add_argument("--out", type=Path, help="session root")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meetsync", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"meetsync {__version__} ({kernels.BACKEND} kernels)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (
        ("simulate", "simulate devices and write sourcedata/"),
        ("align", "fit clock models and write the timing report"),
        ("package", "write the session tree"),
        ("slice", "re-derive per-task run slices"),
        ("qc", "run quality control and write qc_report.json"),
        ("run", "simulate, align, package and qc in one go"),
    ):
        _common(sub.add_parser(name, help=help_), with_config=name != "slice")
    v = sub.add_parser("verify", help="check every file against the manifest")
    v.add_argument("root", type=Path, nargs="?")
    v.add_argument("--out", type=Path, help="session root")
    v.add_argument("--report", type=Path, help="write the verification result as JSON here")
    v.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args, root_required=True) -> PipelineConfig:
    base = PipelineConfig.load(args.config) if getattr(args, "config", None) else None
    if base is None and args.command in ("simulate", "run"):
        base = PipelineConfig.from_dict({})
    cfg = config_from_root(args.out, base) if base is None else base
    return cfg.override(seed=getattr(args, "seed", None), tolerance_ms=getattr(args, "tolerance_ms", None), method=getattr(args, "method", None))


def _root(args, cfg: PipelineConfig | None):
    root = args.out or (cfg.data["out"] if cfg is not None else None)
    if root is None:
        raise ConfigurationError("an output root is required (--out or config 'out')")
    return Path(root)


def _dispatch(args) -> int:
    if args.command == "verify":
        root = args.root or args.out
        if root is None:
            raise ConfigurationError("verify needs a session root")
        result = verify_session(root)
        for problem in result.problems():
            print(problem, file=sys.stderr)
        if args.report:
            args.report.write_bytes(json_bytes(result.to_dict()))
        return EX_OK if result.ok else 2

    if args.command == "slice":
        root = _root(args, None)
        for rel in reslice(root):
            log.info("slice %s", rel)
        return EX_OK

    if args.out is None and getattr(args, "config", None) is None and args.command not in ("simulate", "run"):
        raise ConfigurationError("an output root is required (--out)")
    if args.command in ("simulate", "run"):
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict({})
        cfg = cfg.override(seed=args.seed, tolerance_ms=args.tolerance_ms, method=args.method)
    else:
        cfg = _config(args)
    root = _root(args, cfg)

    if args.command == "simulate":
        simulate(cfg, root)
        return EX_OK
    if args.command == "align":
        report = align(cfg, root)
        if not report.passed:
            log.warning("timing validation failed for %s", [d.device_id for d in report.devices if not d.passed])
        return EX_OK
    if args.command == "package":
        package(cfg, root)
        return EX_OK
    if args.command == "qc":
        summary = quality_control(cfg, root)
    else:
        summary = run_end_to_end(cfg, root)
    for f in summary.findings:
        log.log(logging.ERROR if f.severity.value == "fatal" else logging.WARNING, "%s: %s", f.code, f.message)
    log.info("session status: %s", summary.status.value)
    return summary.exit_code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return _dispatch(args)
    except (ConfigurationError, json.JSONDecodeError) as exc:
        print(f"meetsync: configuration error: {exc}", file=sys.stderr)
        return EX_USAGE
    except (OSError, SessionExistsError, NotASessionError, TSVParseError, StructuralError) as exc:
        print(f"meetsync: {exc}", file=sys.stderr)
        return EX_IOERR


if __name__ == "__main__":
    sys.exit(main())
