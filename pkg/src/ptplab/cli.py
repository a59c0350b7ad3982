"""Command-line entry points.

Exit status: 0 success, 1 runtime failure, 2 usage/config error. Errors are
written to stderr as one tab-separated line: ``error<TAB>kind<TAB>message``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pydantic
import yaml

from . import analysis, report
from .config import ExperimentConfig, dump_config, load_config
from .data import collate, make_task
from .model import PromptModel
from .train import train_run

log = logging.getLogger("ptplab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory or file")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--workers", type=int, default=None, help="parallel runs (default: config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptplab", description="prompt tuning with perturbation regularizers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    _common(p)

    p = sub.add_parser("landscape", help="loss-landscape grid around a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True, help="config naming the task/batch")
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--batch-size", type=int, default=32)
    _common(p)

    p = sub.add_parser("sweep", help="ablation grid over one perturbation family")
    p.add_argument("--kind", required=True, choices=analysis.SWEEP_KINDS)
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: config)")
    _common(p)

    p = sub.add_parser("seeds", help="repeat one configuration over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: config)")
    _common(p)

    p = sub.add_parser("report", help="summarize emitted sweep/seed rows")
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="output directories or TSV files")
    _common(p, out_required=False)

    p = sub.add_parser("schema", help="print the config JSON schema")
    _common(p, out_required=False)
    return parser


def _parse_seeds(text: str | None, cfg: ExperimentConfig) -> list[int]:
    if text is None:
        return list(cfg.seeds)
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --seeds value {text!r}") from None


def _load(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    except (yaml.YAMLError, pydantic.ValidationError, ValueError) as exc:
        raise UsageError(f"invalid config {args.config}: {_one_line(exc)}") from None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = cfg.model_copy(update={"workers": args.workers})
    return cfg


def _data(cfg: ExperimentConfig):
    t = cfg.task
    return make_task(t.name, t.seed, (t.train, t.dev, t.test))


def cmd_train(args) -> None:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    sink = report.TsvSink(out / "metrics.tsv", report.METRICS_HEADER)
    res = train_run(cfg, _data(cfg), sink=sink)
    res.model.save(out / "checkpoint.npz")
    summary = {"best_dev": res.best_dev, "best_epoch": res.best_epoch, "epochs": res.epochs,
               "updates": res.updates, "test": res.test, **res.metric_arrays()}
    (out / "result.json").write_text(json.dumps(summary, indent=2))
    print(f"best_dev={res.best_dev:.4f} test_accuracy={res.test['accuracy']:.4f}")


def cmd_landscape(args) -> None:
    cfg = _load(args)
    model = PromptModel.load(args.checkpoint)
    if args.resolution < 1 or args.resolution % 2 == 0 or args.extent <= 0:
        raise UsageError("--resolution must be odd and --extent positive")
    ids, labels = collate(_data(cfg).test[: args.batch_size], model.vocab.pad_id)
    seed = args.seed if args.seed is not None else 0
    grid = analysis.landscape_grid(model, ids, labels, args.extent, args.resolution, seed)
    rough = analysis.roughness(grid)
    out = Path(args.out)
    path = out / "grid.tsv" if not out.suffix else out
    report.write_grid(grid, path, rough)
    print(f"roughness={rough.value:.6g} loss_range={rough.loss_range:.6g} grid={path}")


def cmd_seeds(args) -> None:
    cfg = _load(args)
    seeds = _parse_seeds(args.seeds, cfg)
    if len(seeds) < 2 or len(set(seeds)) != len(seeds):
        raise UsageError(f"need at least two distinct seeds, got {seeds}")
    out = Path(args.out)
    metrics = report.TsvSink(out / "metrics.tsv", report.METRICS_HEADER)
    rep = analysis.seed_sweep(cfg, seeds, workers=cfg.workers, sink=metrics)
    report.TsvSink(out / "seeds.tsv", report.SEEDS_HEADER).write_rows(report.seeds_rows(rep))
    print(f"{rep.task}\t{rep.method}\tmean={rep.mean:.4f}\tvariance={rep.variance:.6f}"
          f"\tn={len(rep.scores)}")
    if rep.failures:
        raise RuntimeError(f"{len(rep.failures)} seed(s) failed: {sorted(rep.failures)}")


def cmd_sweep(args) -> None:
    cfg = _load(args)
    seeds = _parse_seeds(args.seeds, cfg)
    out = Path(args.out)
    path = out / "sweep.tsv"
    done = {}
    if path.exists():
        done = {(r["kind"], r["cell_id"]): r for r in report.read_tsv(path)}
    sink = report.TsvSink(path, report.SWEEP_HEADER)
    metrics = report.TsvSink(out / "metrics.tsv", report.METRICS_HEADER)
    baseline = {}

    def skip(cell_id):
        row = done.get((args.kind, cell_id))
        return report.report_from_row(row, cfg.task.name) if row else None

    def on_cell(kind, cell):
        if cell.cell_id == "baseline":
            baseline["mean"] = cell.mean
        if (kind, cell.cell_id) not in done:
            sink.write_rows([report.sweep_row(kind, cell, baseline.get("mean"))])

    res = analysis.ablation_sweep(args.kind, cfg, seeds, data=_data(cfg), workers=cfg.workers,
                                  sink=metrics, skip=skip, on_cell=on_cell)
    table = report.sweep_table(report.read_tsv(path), args.kind)
    print(report.format_sweep_table(table))
    log.info("%s: %d cells + baseline", res.kind, len(res.cells))


def collect_rows(inputs) -> tuple[list[dict], list[dict]]:
    sweep_rows, seed_rows = [], []
    for item in inputs:
        p = Path(item)
        if not p.exists():
            raise UsageError(f"no such input {item}")
        files = [p] if p.is_file() else sorted(p.rglob("*.tsv"))
        for f in files:
            if f.name.startswith("sweep"):
                sweep_rows += report.read_tsv(f)
            elif f.name.startswith("seeds"):
                seed_rows += report.read_tsv(f)
    return sweep_rows, seed_rows


def cmd_report(args) -> None:
    sweep_rows, seed_rows = collect_rows(args.inputs)
    blocks = []
    if seed_rows:
        blocks.append(report.format_seeds_table(report.seeds_table(seed_rows)))
    for kind in analysis.SWEEP_KINDS:
        if any(r["kind"] == kind for r in sweep_rows):
            blocks.append(report.format_sweep_table(report.sweep_table(sweep_rows, kind)))
    if not blocks:
        raise UsageError("no sweep.tsv or seeds.tsv rows found")
    text = "\n\n".join(blocks) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_schema(args) -> None:
    text = json.dumps(ExperimentConfig.model_json_schema(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


COMMANDS = {"train": cmd_train, "landscape": cmd_landscape, "sweep": cmd_sweep,
            "seeds": cmd_seeds, "report": cmd_report, "schema": cmd_schema}


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose one of " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error\tusage\t{_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error\truntime\t{type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
