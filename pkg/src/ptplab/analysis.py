"""Loss-landscape slices, multi-seed variance runs and ablation grids."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .config import A2TSpec, ExperimentConfig, PGDSpec, RGSpec, RMSpec
from .data import DatasetSplit, make_task
from .tensor import Tensor
from .train import train_run

log = logging.getLogger(__name__)

# Ablation axes reused from the reference grids.
RG_SIGMAS = (1e-4, 1e-3, 1e-2)
RG_COUNTS = (1, 5, 10, 20)
PGD_ALPHAS = (1e-4, 1e-3, 1e-2)
PGD_ITERS = (1, 2, 3, 4, 5)
RM_COUNTS = tuple(range(1, 11))
A2T_MIN_COS = (0.2, 0.4, 0.6, 0.8)
SWEEP_KINDS = ("rg_grid", "pgd_grid", "rm_line", "a2t_line")


class DegenerateDirectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# landscape


@dataclass
class LandscapeGrid:
    xs: np.ndarray          # magnitudes along the gradient direction u
    ys: np.ndarray          # magnitudes along the orthogonal direction v
    loss: np.ndarray        # (len(xs), len(ys))
    u: np.ndarray
    v: np.ndarray
    batch_id: str
    clean_loss: float

    @property
    def center(self) -> tuple[int, int]:
        return len(self.xs) // 2, len(self.ys) // 2

    def basis_checksums(self) -> tuple[str, str]:
        return (hashlib.sha256(self.u.tobytes()).hexdigest()[:16],
                hashlib.sha256(self.v.tobytes()).hexdigest()[:16])


def _batch_id(ids: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256(np.ascontiguousarray(ids).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return h.hexdigest()[:16]


def _per_example_losses(model, ids, labels, E: np.ndarray) -> np.ndarray:
    with T.no_grad():
        z = model.logits(ids, E_s=Tensor(E)).data
    z = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(labels)), labels]


def landscape_grid(model, ids, labels, extent: float = 1.0, resolution: int = 41,
                   seed: int = 0) -> LandscapeGrid:
    """Batch loss over E_s + x*u + y*v on a (resolution x resolution) grid.

    u is the normalized input-embedding gradient of the clean batch loss,
    v a seeded random direction orthogonalized against u. Padding rows are
    excluded from both directions. Parameters are never touched.
    """
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError("resolution must be odd so the origin is a grid point")
    if extent <= 0:
        raise ValueError("extent must be positive")
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    with T.no_grad():
        E_s = model.embed(ids).data
    valid = (ids != model.vocab.pad_id)[..., None]

    with model.parameters_frozen():
        E = Tensor(E_s, requires_grad=True)
        clean = model.loss(ids, labels, E_s=E)
        T.backward(clean)
    model.zero_grad()
    g = E.grad * valid
    gnorm = np.linalg.norm(g)
    if gnorm < 1e-12:
        raise DegenerateDirectionError(f"input gradient norm {gnorm:.3g} is too small")
    u = g / gnorm
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(E_s.shape) * valid
    for _ in range(2):
        v = v - np.sum(v * u) * u
    v = v / np.linalg.norm(v)

    xs = np.linspace(-extent, extent, resolution)
    ys = np.linspace(-extent, extent, resolution)
    xs[resolution // 2] = ys[resolution // 2] = 0.0
    loss = np.empty((resolution, resolution))
    bsz = len(labels)
    rep_ids = np.tile(ids, (resolution,) + (1,) * (ids.ndim - 1))
    rep_labels = np.tile(labels, resolution)
    for i, x in enumerate(xs):
        stacked = np.concatenate([E_s + x * u + y * v for y in ys])
        per = _per_example_losses(model, rep_ids, rep_labels, stacked)
        loss[i] = per.reshape(resolution, bsz).mean(axis=1)
    return LandscapeGrid(xs, ys, loss, u, v, _batch_id(ids, labels), clean.item())


class Roughness(NamedTuple):
    value: float
    loss_range: float


def roughness(grid: LandscapeGrid) -> Roughness:
    """Largest finite-difference slope between 4-neighbour cells."""
    L = grid.loss
    slopes = [0.0]
    if L.shape[0] > 1:
        slopes.append(np.max(np.abs(np.diff(L, axis=0)) / np.diff(grid.xs)[:, None]))
    if L.shape[1] > 1:
        slopes.append(np.max(np.abs(np.diff(L, axis=1)) / np.diff(grid.ys)[None, :]))
    return Roughness(float(max(slopes)), float(L.max() - L.min()))


# ---------------------------------------------------------------------------
# seed variance


@dataclass
class RunReport:
    task: str
    method: str
    seeds: list[int]
    scores: list[float]
    test_scores: list[float] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def variance(self) -> float:
        """Population variance of the per-seed scores."""
        return float(np.var(self.scores))


def method_name(cfg: ExperimentConfig) -> str:
    spec = cfg.train.perturbation
    return "vanilla" if spec is None else f"ptp+{spec.kind}"


def _seed_job(cfg: ExperimentConfig, seed: int, data: DatasetSplit | None):
    if data is None:
        t = cfg.task
        data = make_task(t.name, t.seed, (t.train, t.dev, t.test))
    rows: list[tuple] = []

    class _Collect:
        def write_rows(self, new):
            rows.extend(new)

    run_id = f"{cfg.name}-{method_name(cfg)}-seed{seed}"
    res = train_run(cfg.with_seed(seed), data, sink=_Collect(), run_id=run_id)
    return res.best_dev, res.test.get("accuracy", float("nan")), rows


def seed_sweep(cfg: ExperimentConfig, seeds: Sequence[int], data: DatasetSplit | None = None,
               workers: int = 1, sink=None) -> RunReport:
    """Train once per seed, everything else fixed; failures are recorded per seed."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("seed_sweep needs at least two seeds")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"seeds must be distinct, got {seeds}")
    report = RunReport(cfg.task.name, method_name(cfg), [], [])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_seed_job, cfg, s, data) for s in seeds]
            outcomes = []
            for s, f in zip(seeds, futures):
                try:
                    outcomes.append((s, f.result(), None))
                except Exception as exc:  # noqa: BLE001
                    outcomes.append((s, None, exc))
    else:
        outcomes = []
        for s in seeds:
            try:
                outcomes.append((s, _seed_job(cfg, s, data), None))
            except Exception as exc:  # noqa: BLE001
                outcomes.append((s, None, exc))
    for s, out, exc in outcomes:
        if exc is not None:
            log.warning("seed %d failed: %s", s, exc)
            report.failures[s] = str(exc)
            continue
        best, test_acc, rows = out
        report.seeds.append(s)
        report.scores.append(best)
        report.test_scores.append(test_acc)
        if sink is not None:
            sink.write_rows(rows)
    return report


# ---------------------------------------------------------------------------
# ablations


@dataclass
class SweepCell:
    cell_id: str
    row: str          # row-axis value ("" for one-dimensional sweeps)
    col: str          # column-axis value ("" for the baseline)
    spec: object      # perturbation spec, None for the baseline
    report: RunReport

    @property
    def mean(self) -> float:
        return self.report.mean

    @property
    def variance(self) -> float:
        return self.report.variance


@dataclass
class SweepResult:
    kind: str
    baseline: SweepCell
    cells: list[SweepCell]

    def delta(self, cell: SweepCell) -> float:
        return cell.mean - self.baseline.mean


def sweep_cells(kind: str, base: ExperimentConfig) -> list[tuple[str, str, str, object]]:
    """(cell_id, row, col, spec) for every cell of an ablation grid."""
    pgd_base = base.train.perturbation if isinstance(base.train.perturbation, PGDSpec) \
        else PGDSpec()
    a2t_base = base.train.perturbation if isinstance(base.train.perturbation, A2TSpec) \
        else A2TSpec()
    if kind == "rg_grid":
        return [(f"sigma={s:g},count={c}", f"{s:g}", str(c), RGSpec(sigma=s, count=c))
                for s in RG_SIGMAS for c in RG_COUNTS]
    if kind == "pgd_grid":
        return [(f"alpha={a:g},iters={t}", f"{a:g}", str(t),
                 pgd_base.model_copy(update={"alpha": a, "iters": t}))
                for a in PGD_ALPHAS for t in PGD_ITERS]
    if kind == "rm_line":
        return [(f"count={c}", "", str(c), RMSpec(count=c)) for c in RM_COUNTS]
    if kind == "a2t_line":
        return [(f"min_cos={m:g}", "", f"{m:g}", a2t_base.model_copy(update={"min_cos": m}))
                for m in A2T_MIN_COS]
    raise ValueError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")


def ablation_sweep(kind: str, base: ExperimentConfig, seeds: Sequence[int] | None = None,
                   data: DatasetSplit | None = None, workers: int = 1, sink=None,
                   skip: Callable[[str], RunReport | None] | None = None,
                   on_cell: Callable[[str, SweepCell], None] | None = None) -> SweepResult:
    """Run the baseline and every grid cell through :func:`seed_sweep`.

    ``skip(cell_id)`` may return a stored report to reuse instead of
    retraining; ``on_cell`` sees each finished cell (for incremental output).
    """
    seeds = list(seeds if seeds is not None else base.seeds)
    cells = sweep_cells(kind, base)

    def run(cell_id, row, col, spec):
        report = skip(cell_id) if skip else None
        if report is None:
            report = seed_sweep(base.with_perturbation(spec), seeds, data, workers, sink)
        cell = SweepCell(cell_id, row, col, spec, report)
        if on_cell:
            on_cell(kind, cell)
        return cell

    baseline = run("baseline", "", "", None)
    return SweepResult(kind, baseline, [run(*c) for c in cells])
