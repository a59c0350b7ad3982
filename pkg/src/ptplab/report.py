"""Flat TSV outputs and the summary tables built from them.

Files (all tab-separated with a fixed header):

* ``metrics.tsv``  run_id, epoch, split, metric, value
* ``seeds.tsv``    task, method, seed, best_dev, test_accuracy
* ``sweep.tsv``    kind, cell_id, row, col, n_seeds, mean, variance, delta, scores
* ``grid.tsv``     x, y, loss   (preceded by ``#`` header lines)
"""

from __future__ import annotations

import csv
import threading
from pathlib import Path
from typing import Iterable

import numpy as np

from .analysis import (A2T_MIN_COS, PGD_ALPHAS, PGD_ITERS, RG_COUNTS, RG_SIGMAS, RM_COUNTS,
                       LandscapeGrid, Roughness, RunReport, SweepCell)

METRICS_HEADER = ("run_id", "epoch", "split", "metric", "value")
SEEDS_HEADER = ("task", "method", "seed", "best_dev", "test_accuracy")
SWEEP_HEADER = ("kind", "cell_id", "row", "col", "n_seeds", "mean", "variance", "delta", "scores")
GRID_HEADER = ("x", "y", "loss")

TABLE_AXES = {
    "rg_grid": ("sigma", [f"{s:g}" for s in RG_SIGMAS], "count", [str(c) for c in RG_COUNTS]),
    "pgd_grid": ("alpha", [f"{a:g}" for a in PGD_ALPHAS], "iters", [str(t) for t in PGD_ITERS]),
    "rm_line": ("", [""], "count", [str(c) for c in RM_COUNTS]),
    "a2t_line": ("", [""], "min_cos", [f"{m:g}" for m in A2T_MIN_COS]),
}


class TsvSink:
    """Append-only TSV writer; one lock serializes every write."""

    def __init__(self, path: str | Path, header: tuple[str, ...]):
        self.path = Path(path)
        self.header = header
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh, delimiter="\t").writerow(header)

    def write_rows(self, rows: Iterable[tuple]) -> None:
        rows = list(rows)
        if not rows:
            return
        with self._lock, self.path.open("a", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            for r in rows:
                if len(r) != len(self.header):
                    raise ValueError(f"row {r!r} does not match header {self.header}")
                w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_tsv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


def seeds_rows(report: RunReport) -> list[tuple]:
    return [(report.task, report.method, s, sc, t)
            for s, sc, t in zip(report.seeds, report.scores, report.test_scores)]


def sweep_row(kind: str, cell: SweepCell, baseline_mean: float | None) -> tuple:
    delta = cell.mean - baseline_mean if baseline_mean is not None else 0.0
    return (kind, cell.cell_id, cell.row, cell.col, len(cell.report.scores), cell.mean,
            cell.variance, delta, ",".join(repr(s) for s in cell.report.scores))


def report_from_row(row: dict[str, str], task: str = "") -> RunReport:
    scores = [float(s) for s in row["scores"].split(",") if s]
    return RunReport(task, row["cell_id"], list(range(len(scores))), scores)


def write_grid(grid: LandscapeGrid, path: str | Path, rough: Roughness | None = None) -> None:
    cu, cv = grid.basis_checksums()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# batch={grid.batch_id} u_sha256={cu} v_sha256={cv}\n")
        fh.write(f"# clean_loss={grid.clean_loss!r}\n")
        if rough is not None:
            fh.write(f"# roughness={rough.value!r} loss_range={rough.loss_range!r}\n")
        w = csv.writer(fh, delimiter="\t")
        w.writerow(GRID_HEADER)
        for i, x in enumerate(grid.xs):
            for j, y in enumerate(grid.ys):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(grid.loss[i, j]))])


# ---------------------------------------------------------------------------
# summary tables


def sweep_table(rows: list[dict[str, str]], kind: str, value: str = "mean") -> dict:
    """Pivot one sweep's rows into {"rows", "cols", "cells", "baseline"}."""
    row_name, row_keys, col_name, col_keys = TABLE_AXES[kind]
    mine = [r for r in rows if r["kind"] == kind]
    by_key = {(r["row"], r["col"]): float(r[value]) for r in mine if r["cell_id"] != "baseline"}
    base = [float(r["mean"]) for r in mine if r["cell_id"] == "baseline"]
    cells = [[by_key.get((rk, ck)) for ck in col_keys] for rk in row_keys]
    return {"kind": kind, "row_name": row_name, "rows": row_keys, "col_name": col_name,
            "cols": col_keys, "cells": cells, "baseline": base[0] if base else None}


def format_sweep_table(table: dict) -> str:
    head = [f"{table['kind']} ({table['row_name'] or '-'} x {table['col_name']})"]
    head += [f"{table['col_name']}={c}" for c in table["cols"]]
    lines = ["\t".join(head)]
    for rk, vals in zip(table["rows"], table["cells"]):
        label = f"{table['row_name']}={rk}" if table["row_name"] else "score"
        lines.append("\t".join([label] + ["" if v is None else f"{v:.4f}" for v in vals]))
    if table["baseline"] is not None:
        lines.append(f"baseline\t{table['baseline']:.4f}")
    return "\n".join(lines)


def seeds_table(rows: list[dict[str, str]]) -> list[dict]:
    """Per (task, method): seeds, mean and population variance of best_dev."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["task"], r["method"]), []).append(float(r["best_dev"]))
    return [{"task": t, "method": m, "n": len(v), "mean": float(np.mean(v)),
             "variance": float(np.var(v))} for (t, m), v in sorted(groups.items())]


def format_seeds_table(entries: list[dict]) -> str:
    lines = ["task\tmethod\tn\tmean\tvariance"]
    for e in entries:
        lines.append(f"{e['task']}\t{e['method']}\t{e['n']}\t{e['mean']:.4f}\t{e['variance']:.6f}")
    return "\n".join(lines)
