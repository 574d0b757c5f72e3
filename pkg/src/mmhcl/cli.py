"""``mmhcl prepare|train|evaluate|sweep``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import PRESETS, ConfigError, canonical_json
from .data import DataError
from .graphs import GraphError
from .linalg import ShapeError

log = logging.getLogger("mmhcl")

EXIT_CONFIG = 2
EXIT_DATA = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmhcl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("prepare", "train", "evaluate", "sweep"))
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append", choices=("u2u", "i2i", "scl"), default=[])
    p.add_argument("--k", type=int, help="cut-off for evaluation metrics (default 20)")
    p.add_argument("--cold-start", type=float, dest="cold_start",
                   help="fraction of items whose interactions are held out entirely")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--checkpoint", help="checkpoint path for 'evaluate'")
    p.add_argument("--grid", help="sweep grid as a JSON object or a path to one")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> pipeline.RunConfig:
    overrides = dict(preset=args.preset, seed=args.seed, ablate=args.ablate, k=args.k,
                     cold_start=args.cold_start, output_dir=args.output_dir)
    if args.config:
        return pipeline.load_run_config(args.config, **overrides)
    if not args.preset:
        raise ConfigError("either --config or --preset is required")
    return pipeline.build_run_config({}, **overrides)


def cmd_prepare(cfg: pipeline.RunConfig) -> dict:
    prep = pipeline.prepare(cfg)
    out = pipeline.save_prepared(cfg, prep)
    return json.loads((out / pipeline.MANIFEST).read_text())


def cmd_train(cfg: pipeline.RunConfig) -> dict:
    prep = pipeline.load_prepared(cfg)
    report, best = pipeline.train(cfg, prep)
    path = pipeline.save_training(cfg, best, report)
    return {"checkpoint": str(path), "best_epoch": report.best_epoch,
            "best_val_recall": report.best_val_recall, "stop_reason": report.stop_reason,
            "config_digest": cfg.config_digest()}


def cmd_evaluate(cfg: pipeline.RunConfig, checkpoint=None) -> dict:
    prep = pipeline.load_prepared(cfg)
    params, model_cfg = pipeline.load_training(cfg, checkpoint)
    doc = pipeline.evaluate(cfg, prep, params, model_cfg).to_json()
    (Path(cfg.output_dir) / "metrics.json").write_text(canonical_json(doc) + "\n")
    return doc


def _parse_grid(arg, cfg) -> dict:
    if arg is None:
        if not cfg.grid:
            raise ConfigError("sweep needs a grid (config key 'grid' or --grid)")
        return cfg.grid
    path = Path(arg)
    try:
        grid = json.loads(path.read_text() if path.exists() else arg)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid grid: {exc}") from exc
    cfg.grid = grid
    cfg.validate()
    return grid


def expand_grid(grid: dict) -> list[dict]:
    keys = list(grid)
    for key in keys:
        if not isinstance(grid[key], list) or not grid[key]:
            raise ConfigError(f"grid entry {key!r} must be a nonempty list")
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def cmd_sweep(cfg: pipeline.RunConfig, grid: dict) -> list[dict]:
    cells = expand_grid(grid)
    cache: dict[str, pipeline.Prepared] = {}
    rows = []
    for cell in cells:
        row = dict(cell)
        try:
            cell_cfg = cfg.with_model(**cell)
            key = cell_cfg.data_digest()
            if key not in cache:
                cache[key] = pipeline.prepare(cell_cfg)
            prep = cache[key]
            report, best = pipeline.train(cell_cfg, prep)
            metrics = pipeline.evaluate(cell_cfg, prep, best)
            row.update(recall=metrics.recall, precision=metrics.precision, ndcg=metrics.ndcg,
                       best_epoch=report.best_epoch, status="ok")
        except Exception as exc:  # one bad cell must not abort the sweep
            log.warning("sweep cell %s failed: %s", cell, exc)
            row.update(recall="", precision="", ndcg="", best_epoch="", status=f"error: {exc}")
        rows.append(row)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(grid) + ["recall", "precision", "ndcg", "best_epoch", "status"]
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "prepare":
            result = cmd_prepare(cfg)
        elif args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, args.checkpoint)
        else:
            result = cmd_sweep(cfg, _parse_grid(args.grid, cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
