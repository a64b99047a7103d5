"""Command line entry point: single runs, ablation grids, layer probes, gradient checks.

Exit status is 0 on success, 1 when a config or grid fails validation and
2 when a run fails at runtime (divergence, failed gradient check, I/O).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import build_stack, drift_stack, layer_io_similarity, write_similarity_csv
from .config import ConfigError, MoltConfig, load_config
from .fusion import write_fusion_csv
from .losses import write_cosine_csv
from .trainer import (MetricsRecord, MoltModel, TrainingDiverged, dataset_for, mean_token_cosines, run_grad_suite,
                      stage_combinations, train)

log = logging.getLogger("molt")

AXES = ("stage-plan", "token-count", "adapter-count", "fusion-method", "tor-lambda")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
GRAD_TOLERANCE = 1e-5

CURVE_COLUMNS = ("epoch", "total", "task_loss", "tor_audio", "tor_visual", "train_accuracy", "val_accuracy", "lr")
ABLATION_COLUMNS = ("axis", "value", "seed", "status", "test_accuracy", "val_accuracy", "trainable_count",
                    "trainable_fraction", "activation_elements", "sequential_elements", "error")
SUMMARY_COLUMNS = ("axis", "value", "n_ok", "n_failed", "median_test_accuracy", "median_trainable_fraction",
                   "activation_elements")


# single runs -----------------------------------------------------------------

def write_run(out: Path, model: MoltModel, record: MetricsRecord, dataset) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(record.to_json() + "\n")
    (out / "params.json").write_text(json.dumps({"params": record.params, "memory": record.memory},
                                                indent=2, sort_keys=True) + "\n")
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for e in record.epochs:
            w.writerow([e["epoch"]] + [repr(float(e[c])) for c in CURVE_COLUMNS[1:]])
    write_fusion_csv(out / "fusion_weights.csv",
                     [(record.run_id, m, layer, a)
                      for m in ("audio", "visual")
                      for layer, a in zip(model.layers, record.mean_alpha[m])])
    cos = mean_token_cosines(model, dataset)
    write_cosine_csv(out / "token_cosines.csv", [(record.run_id, m, cos[m]) for m in ("audio", "visual")])


def run_experiment(config: MoltConfig, out: Path, run_id: str = "run") -> MetricsRecord:
    dataset = dataset_for(config)
    model, record = train(config, dataset, run_id=run_id)
    write_run(out, model, record, dataset)
    return record


# ablation grids --------------------------------------------------------------

@dataclass
class AblationGrid:
    axis: str
    values: list
    base_config: MoltConfig
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    workers: int = 1

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "AblationGrid":
        errors = {}
        if not isinstance(raw, dict):
            raise ConfigError({"<root>": "expected an object"})
        for key in raw:
            if key not in ("axis", "values", "base_config", "seeds", "workers"):
                errors[key] = "unknown field"
        axis = raw.get("axis")
        if axis not in AXES:
            errors["axis"] = f"expected one of {list(AXES)}, got {axis!r}"
        values = raw.get("values")
        if axis == "stage-plan" and values == "all":
            values = [list(c) for c in stage_combinations()]
        if not isinstance(values, list) or not values:
            errors["values"] = "expected a nonempty list"
        seeds = raw.get("seeds", list(DEFAULT_SEEDS))
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            errors["seeds"] = "expected a nonempty list of integers"
        workers = raw.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            errors["workers"] = "expected a positive integer"
        base = raw.get("base_config", {})
        try:
            if isinstance(base, str):
                path = Path(base) if base_dir is None else base_dir / base
                base_cfg = load_config(path)
            else:
                base_cfg = MoltConfig.from_dict(base)
        except ConfigError as exc:
            errors.update({f"base_config.{k}": v for k, v in exc.errors.items()})
            base_cfg = None
        except OSError as exc:
            errors["base_config"] = str(exc)
            base_cfg = None
        if errors:
            raise ConfigError(errors)
        grid = cls(axis, values, base_cfg, seeds, workers)
        for i, v in enumerate(values):
            try:
                grid.cell_config(v, seeds[0])
            except ConfigError as exc:
                errors.update({f"values[{i}].{k}": m for k, m in exc.errors.items()})
            except (TypeError, ValueError) as exc:
                errors[f"values[{i}]"] = str(exc)
        if errors:
            raise ConfigError(errors)
        return grid

    def cell_config(self, value, seed: int) -> MoltConfig:
        changes: dict = {"seed": seed}
        if self.axis == "stage-plan":
            changes["stage_plan.adapted"] = list(value)
        elif self.axis == "token-count":
            changes["fdm.n_tokens"] = value
        elif self.axis == "adapter-count":
            n_uda, n_cda = value
            changes["fdm.n_uda"], changes["fdm.n_cda"] = n_uda, n_cda
        elif self.axis == "fusion-method":
            changes["fusion"] = value
        else:
            changes["lambda_tor"] = value
        return self.base_config.replace(**changes)


def value_label(value) -> str:
    if isinstance(value, (list, tuple)):
        return "+".join(str(v) for v in value)
    return str(value)


def _run_cell(args) -> dict:
    grid, value, seed, out = args
    row = {"axis": grid.axis, "value": value_label(value), "seed": seed}
    try:
        cfg = grid.cell_config(value, seed)
        rec = run_experiment(cfg, out, run_id=f"{grid.axis}={row['value']}/seed{seed}")
        row.update(status="ok", test_accuracy=rec.test_accuracy, val_accuracy=rec.val_accuracy,
                   trainable_count=rec.params["trainable_count"],
                   trainable_fraction=rec.params["trainable_fraction"],
                   activation_elements=rec.memory["activation_elements_adapted"],
                   sequential_elements=rec.memory["sequential_elements"], error="")
    except Exception as exc:  # a failing cell must not stop the grid
        log.debug("cell %s seed %s failed:\n%s", row["value"], seed, traceback.format_exc())
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def summarize_rows(rows: list[dict]) -> list[dict]:
    """Median over seeds per grid value; independent of row order."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["value"], []).append(r)
    out = []
    for value, rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        med = (lambda k: statistics.median(r[k] for r in ok)) if ok else (lambda k: "")
        out.append({"axis": rs[0]["axis"], "value": value, "n_ok": len(ok), "n_failed": len(rs) - len(ok),
                    "median_test_accuracy": med("test_accuracy"),
                    "median_trainable_fraction": med("trainable_fraction"),
                    "activation_elements": ok[0]["activation_elements"] if ok else ""})
    return out


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run_ablation(grid: AblationGrid, out: Path) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(grid, v, s, out / "cells" / value_label(v) / f"seed{s}") for v in grid.values for s in grid.seeds]
    if grid.workers == 1:
        rows = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(grid.workers, len(jobs))) as pool:
            rows = list(pool.map(_run_cell, jobs))
    _write_rows(out / "ablation.csv", ABLATION_COLUMNS, rows)
    _write_rows(out / "summary.csv", SUMMARY_COLUMNS, summarize_rows(rows))
    return rows


# probe -----------------------------------------------------------------------

def probe_stacks(config: MoltConfig, kind: str, angles: list[float] | None):
    b = config.backbone
    if kind == "drift":
        if not angles:
            raise ConfigError({"angles": "drift probe needs at least one angle"})
        if b.width % 2:
            raise ConfigError({"backbone.width": "drift probe rotates coordinate pairs; width must be even"})
        return [drift_stack(m, angles, b.n_tokens, b.width) for m in ("audio", "visual")]
    return [build_stack(m, b.depth, b.width, b.heads, b.n_tokens, b.seed, residual_only=kind == "residual-only")
            for m in ("audio", "visual")]


def run_probe(config: MoltConfig, out: Path, kind: str = "default", angles=None, batch: int = 64):
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([config.seed, 31])
    reports = []
    for stack in probe_stacks(config, kind, angles):
        x = rng.normal(size=(batch, stack.n_tokens, stack.width))
        reports.append(layer_io_similarity(stack, x))
    write_similarity_csv(out / "similarity.csv", reports)
    return reports


# entry point -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="molt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--seed", type=int, help="override the run seed")

    sp = sub.add_parser("run", help="train and evaluate one config")
    sp.add_argument("config", type=Path)
    common(sp)
    sp = sub.add_parser("ablate", help="run an ablation grid")
    sp.add_argument("grid", type=Path)
    common(sp)
    sp.add_argument("--workers", type=int, help="override the grid's worker count")
    sp = sub.add_parser("probe", help="per-layer input/output token cosine")
    sp.add_argument("config", type=Path)
    common(sp)
    sp.add_argument("--stack", choices=("default", "residual-only", "drift"), default="default")
    sp.add_argument("--angles", type=float, nargs="*", help="per-layer rotation angles (radians) for --stack drift")
    sp.add_argument("--batch", type=int, default=64)
    sp = sub.add_parser("gradcheck", help="finite-difference check of every trainable gradient")
    sp.add_argument("config", type=Path)
    common(sp)
    return p


def _load(path: Path, seed: int | None) -> MoltConfig:
    cfg = load_config(path)
    return cfg.replace(seed=seed) if seed is not None else cfg


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "run":
            cfg = _load(args.config, args.seed)
            rec = run_experiment(cfg, args.out, run_id=f"{args.config.stem}-s{cfg.seed}")
            log.info("test accuracy %.4f -> %s", rec.test_accuracy, args.out)
        elif args.command == "ablate":
            raw = json.loads(args.grid.read_text())
            grid = AblationGrid.from_dict(raw, args.grid.parent)
            if args.seed is not None:
                grid.seeds = [args.seed]
            if args.workers:
                grid.workers = args.workers
            rows = run_ablation(grid, args.out)
            failed = sum(r["status"] != "ok" for r in rows)
            log.info("%d cells, %d failed -> %s", len(rows), failed, args.out)
        elif args.command == "probe":
            cfg = _load(args.config, args.seed)
            run_probe(cfg, args.out, args.stack, args.angles, args.batch)
            log.info("wrote %s", args.out / "similarity.csv")
        else:
            cfg = _load(args.config, args.seed)
            try:
                report = run_grad_suite(cfg)
            except ValueError as exc:
                raise ConfigError({"backbone": str(exc)}) from None
            args.out.mkdir(parents=True, exist_ok=True)
            payload = {"max_rel_error": report.max_rel_error, "n_checked": report.n_checked,
                       "worst": [report.worst[0], [int(i) for i in report.worst[1]]] if report.worst else None,
                       "per_param": report.per_param, "tolerance": GRAD_TOLERANCE}
            (args.out / "gradcheck.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
            log.info("max relative error %.3e over %d entries", report.max_rel_error, report.n_checked)
            if not report.max_rel_error < GRAD_TOLERANCE:
                log.error("gradient check failed (tolerance %g)", GRAD_TOLERANCE)
                return 2
    except ConfigError as exc:
        for k, v in exc.errors.items():
            print(f"invalid {k}: {v}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"invalid JSON: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
