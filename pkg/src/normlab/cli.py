"""Command-line entry point: ``normlab run | sweep | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .experiments import ExperimentConfig, parse_config, resolve_seed, run_experiment

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field
        self.message = message


def _error(kind: str, **info) -> None:
    print(json.dumps({"error": kind, **info}, sort_keys=True), file=sys.stderr)


def load_config(args) -> tuple[ExperimentConfig, str]:
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        raise ConfigError("<file>", str(e)) from e
    try:
        cfg = parse_config(text)
        if args.out is not None:
            cfg = cfg.model_copy(update={"output_dir": args.out})
        cfg, source = resolve_seed(cfg, args.seed)
        # validate overrides through the same schema
        return parse_config(cfg.resolved_json()), source
    except ValidationError as e:
        err = e.errors()[0]
        raise ConfigError(".".join(str(p) for p in err["loc"]) or "<root>", err["msg"]) from e
    except ValueError as e:  # malformed NORMLAB_SEED
        raise ConfigError("seed", str(e)) from e


def _lambdas(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from e
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("lambda values must be a nonempty list of numbers >= 0")
    return vals


def _run(args, sweep: bool) -> int:
    try:
        cfg, source = load_config(args)
        if sweep:
            update = {"experiment": "LambdaSweep"}
            if args.lambdas is not None:
                update["ct"] = cfg.ct.model_copy(update={"lambdas": args.lambdas})
            cfg = parse_config(cfg.model_copy(update=update).resolved_json())
    except ConfigError as e:
        _error("invalid_config", field=e.field, message=e.message)
        return EXIT_CONFIG
    except ValidationError as e:
        err = e.errors()[0]
        _error("invalid_config", field=".".join(str(p) for p in err["loc"]), message=err["msg"])
        return EXIT_CONFIG
    try:
        summary, root = run_experiment(cfg, threads=args.threads, seed_source=source)
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        logging.getLogger("normlab").debug("run failed", exc_info=True)
        _error("runtime", type=type(e).__name__, message=str(e))
        return EXIT_RUNTIME
    print(json.dumps({"output_dir": str(root), "summary": summary}, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def format_report(report: dict) -> str:
    """Aligned two-column table of a MetricsReport's scalar and per-key entries."""
    rows: list[tuple[str, str]] = []

    def walk(prefix: str, v) -> None:
        if isinstance(v, dict):
            for k in sorted(v):
                walk(f"{prefix}.{k}" if prefix else str(k), v[k])
        elif v is None:
            rows.append((prefix, "-"))
        elif isinstance(v, float):
            rows.append((prefix, f"{v:.4f}"))
        else:
            rows.append((prefix, str(v)))

    walk("", report)
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _report(args) -> int:
    try:
        report = json.loads(Path(args.path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        _error("invalid_report", message=str(e))
        return EXIT_RUNTIME
    print(format_report(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help="override output_dir")
        sp.add_argument("--seed", type=int, help="override the top-level seed")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for per-replicate work")

    common(sub.add_parser("run", help="run the experiment named in the config"))
    sp = sub.add_parser("sweep", help="lambda sweep over the config's shortcut setup")
    common(sp)
    sp.add_argument("--lambdas", type=_lambdas, help="comma-separated lambda values")
    rp = sub.add_parser("report", help="print a MetricsReport JSON as a table")
    rp.add_argument("path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "report":
        return _report(args)
    if args.threads < 1:
        _error("invalid_config", field="--threads", message="must be >= 1")
        return EXIT_CONFIG
    return _run(args, sweep=args.command == "sweep")


if __name__ == "__main__":
    sys.exit(main())
