"""Command-line entry point: ``tokprobe <subcommand> --run-config run.json``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .config import validate_config
from .errors import ConfigError, TokprobeError
from .pipeline import STAGES, Run

log = logging.getLogger("tokprobe")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

# flag -> dotted config key
_PATH_FLAGS = {
    "weights": "paths.weights",
    "vocab": "paths.vocab",
    "config": "paths.config",
    "cache_dir": "paths.cache_dir",
    "data_dir": "paths.data_dir",
    "output_dir": "paths.output_dir",
}


class _UsageError(TokprobeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--run-config", "-c", metavar="FILE", help="run configuration (flat JSON, dotted keys)")
    common.add_argument("--weights", help="weight archive (.safetensors)")
    common.add_argument("--vocab", help="WordPiece vocabulary, one token per line")
    common.add_argument("--config", help="encoder config JSON")
    common.add_argument("--cache-dir", help="representation cache directory")
    common.add_argument("--data-dir", help="directory holding the probing TSV files")
    common.add_argument("--output-dir", help="root of the run output tree")
    common.add_argument("--seed", type=int)
    common.add_argument("--logit", action="store_true", default=None,
                        help="attribute the gold-class logit instead of its probability")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker threads for encoder passes (default: logical cores)")
    common.add_argument("--force", action="store_true", help="recompute even if the stage is marked complete")
    common.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="tokprobe", description="Probe and attribute BERT-style layer representations.")
    parser.add_argument("--version", action="version", version=f"tokprobe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    toy = sub.add_parser("toy", help="write the toy model, datasets and a matching run config")
    toy.add_argument("outdir")
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _overrides(args):
    out = {}
    for flag, key in _PATH_FLAGS.items():
        value = getattr(args, flag, None)
        if value:
            out[key] = os.path.abspath(value)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.logit:
        out["attribution.logit"] = True
    return out


def _emit_error(kind, message, **extra):
    payload = {"error": kind, "message": message}
    payload.update(extra)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def _write_toy(outdir, seed):
    from .toy import build_toy_artifacts

    build_toy_artifacts(outdir, seed=seed)
    run_cfg = {
        "paths.weights": "weights.safetensors",
        "paths.vocab": "vocab.txt",
        "paths.config": "config.json",
        "paths.data_dir": "data",
        "paths.output_dir": "runs",
        "seed": seed,
        "top_tokens.min_freq": 20,
    }
    with open(os.path.join(outdir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(run_cfg, f, indent=1, sort_keys=True)
        f.write("\n")
    print(json.dumps({"toy": os.path.abspath(outdir), "run_config": os.path.join(os.path.abspath(outdir), "run.json")}))


def _execute(args):
    if args.command == "toy":
        _write_toy(args.outdir, args.seed)
        return EXIT_OK
    source = args.run_config if args.run_config else {}
    cfg = validate_config(source, overrides=_overrides(args))
    if args.dry_run:
        print(json.dumps({"valid": True, "config_hash": cfg.run_hash, "run_dir": cfg.run_dir,
                          "config": cfg.public()}, sort_keys=True))
        return EXIT_OK
    os.makedirs(cfg.run_dir, exist_ok=True)
    with open(os.path.join(cfg.run_dir, "config.normalized.json"), "w", encoding="utf-8") as f:
        json.dump({"config_hash": cfg.run_hash, **cfg.public()}, f, indent=1, sort_keys=True)
        f.write("\n")
    run = Run(cfg, workers=args.workers, force=args.force)
    stages = [s for s in STAGES if s != "export-vectors"] if args.command == "pipeline" else [args.command]
    results = [run.run_stage(s) for s in stages]
    print(json.dumps({
        "config_hash": cfg.run_hash,
        "run_dir": cfg.run_dir,
        "stages": [{"stage": r.stage, "skipped": r.skipped, "directory": r.directory} for r in results],
    }, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _emit_error("UsageError", str(exc))
        return EXIT_USER
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return _execute(args)
    except ConfigError as exc:
        _emit_error("ConfigError", str(exc), errors=exc.errors)
        return EXIT_USER
    except (TokprobeError, OSError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort handler keeps the error machine-readable
        log.debug("internal error", exc_info=True)
        _emit_error("InternalError", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
