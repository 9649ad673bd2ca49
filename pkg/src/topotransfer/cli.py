"""Command-line runner: single runs and one-at-a-time parameter sweeps.

A run writes four files into ``<out>/<mode>_seed<seed>/``:

``manifest.json``   the resolved config and seed (enough to reproduce the run)
``stages.jsonl``    one JSON object per stage record
``metrics.json``    AA, AF, AF_first and the accuracy matrix
``bank.json``       the final prior bank (``null`` when the mode has none)

A sweep writes one such directory per grid point under ``<out>/sweep/`` plus
``sweep.csv`` with columns ``parameter,value,AA,AF,AF_first,status,error``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import ConfigError, MANIFEST_FORMAT, RunConfig, load_config, override, with_seed
from .harness import RunResult, StageError, generate_stream, run_continual
from .prior_bank import PriorBank

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2
SWEEP_COLUMNS = ("parameter", "value", "AA", "AF", "AF_first", "status", "error")


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def run_name(config: RunConfig) -> str:
    return f"{config.mode.replace(':', '-')}_seed{config.seed}"


def manifest(config: RunConfig) -> dict[str, Any]:
    return {
        "format": MANIFEST_FORMAT,
        "seed": config.seed,
        "mode": config.mode,
        "config": config.to_dict(),
    }


def execute(config: RunConfig) -> RunResult:
    tasks, mask = generate_stream(config.stream)
    return run_continual(tasks, mask, config.pipeline(), seed=config.seed)


def write_run(config: RunConfig, result: RunResult, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(_dump(manifest(config)))
    lines = [json.dumps(r.to_record(), sort_keys=True, allow_nan=False) for r in result.records]
    (directory / "stages.jsonl").write_text("".join(line + "\n" for line in lines))
    (directory / "metrics.json").write_text(_dump(result.metrics.to_record()))
    bank = result.bank.to_record() if result.bank is not None else None
    (directory / "bank.json").write_text(_dump(bank))


def read_run(directory: str | Path) -> dict[str, Any]:
    """Parse every artifact of a run directory back into Python objects."""
    d = Path(directory)
    bank = json.loads((d / "bank.json").read_text())
    return {
        "config": load_config(d / "manifest.json"),
        "stages": [json.loads(line) for line in (d / "stages.jsonl").read_text().splitlines()],
        "metrics": json.loads((d / "metrics.json").read_text()),
        "bank": PriorBank.from_record(bank) if bank is not None else None,
    }


def run(config: RunConfig, out: Path | None = None) -> Path:
    """Execute one run and persist it; returns the result directory."""
    directory = Path(out if out is not None else config.output_dir) / run_name(config)
    result = execute(config)
    write_run(config, result, directory)
    return directory


def parse_grid(items: Sequence[str]) -> list[tuple[str, list[float]]]:
    grid = []
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not key or not values:
            raise ConfigError(item, "sweep must look like key=v1,v2,...")
        try:
            grid.append((key.strip(), [float(v) for v in values.split(",")]))
        except ValueError:
            raise ConfigError(key, f"non-numeric sweep value in {values!r}") from None
    if not grid:
        raise ConfigError("sweep", "grid is empty")
    return grid


def sweep(config: RunConfig, grid: Sequence[tuple[str, Sequence[float]]],
          out: Path | None = None) -> list[dict[str, Any]]:
    """One run per grid point, varying one parameter at a time around ``config``.

    A failing point is recorded with ``status=failed`` and the sweep moves on.
    """
    root = Path(out if out is not None else config.output_dir) / "sweep"
    rows = []
    point = 0
    for key, values in grid:
        override(config, key, values[0])  # reject unknown keys before any work
        for value in values:
            row: dict[str, Any] = {"parameter": key, "value": value, "AA": "", "AF": "",
                                   "AF_first": "", "status": "ok", "error": ""}
            try:
                cfg = override(config, key, value)
                directory = root / f"{point:03d}_{key}={value:g}"
                result = execute(cfg)
                write_run(cfg, result, directory)
                m = result.metrics
                row.update(AA=m.aa, AF=m.af, AF_first=m.af_first)
            except Exception as exc:  # record and continue
                log.warning("sweep point %s=%s failed: %s", key, value, exc)
                row.update(status="failed", error=str(exc))
            rows.append(row)
            point += 1
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topotransfer", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="JSON config file or a run manifest (defaults if omitted)")
    p.add_argument("--mode", help="full | naive | ablation:NAME")
    p.add_argument("--seed", type=int, help="overrides stream.seed")
    p.add_argument("--out", help="output root (overrides output_dir)")
    p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2",
                   help="sweep one parameter; repeat for more (rho, lambda_kl, lambda_r, ...)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else RunConfig()
        if args.mode is not None:
            config = override(config, "mode", args.mode)
        if args.seed is not None:
            config = with_seed(config, args.seed)
        out = Path(args.out) if args.out else None
        grid = parse_grid(args.sweep) if args.sweep else None
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if grid is not None:
        try:
            rows = sweep(config, grid, out)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        writer = csv.DictWriter(sys.stdout, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUN_FAILED

    try:
        directory = run(config, out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED
    metrics = json.loads((directory / "metrics.json").read_text())
    print(f"{directory}  AA={metrics['AA']:.4f}  AF={metrics['AF']:.4f}  "
          f"AF_first={metrics['AF_first']:.4f}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
