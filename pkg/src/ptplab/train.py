"""Prompt tuning loops: the clean step, the clean+perturbed step, and full runs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .config import A2TSpec, ExperimentConfig, OptimizerConfig, PGDSpec, RGSpec, RMSpec
from .data import DatasetSplit, Example, collate
from .model import PromptModel
from .perturb import a2t_perturb_batch, pgd_perturb, rg_perturb, rm_perturb
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.updates = 0

    def step(self) -> None:
        for p in self.params.values():
            p.data = p.data - self.lr * p.grad
        self.updates += 1


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.updates = 0

    def step(self) -> None:
        self.updates += 1
        t = self.updates
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(params, lr: float, cfg: OptimizerConfig):
    if cfg.name == "sgd":
        return SGD(params, lr)
    return Adam(params, lr, cfg.beta1, cfg.beta2, cfg.eps)


# ---------------------------------------------------------------------------
# steps


def _update(model: PromptModel, opt, ids, labels, delta: np.ndarray | None = None) -> float:
    model.zero_grad()
    E_s = model.embed(ids)
    if delta is not None:
        E_s = T.add(E_s, Tensor(delta))
    loss = model.loss(ids, labels, E_s=E_s)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    T.backward(loss)
    opt.step()
    model.zero_grad()
    return value


def standard_step(model: PromptModel, opt, ids, labels) -> float:
    """One update on the clean batch; returns the pre-update loss."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    return _update(model, opt, ids, labels)


class StepLosses(NamedTuple):
    clean: float
    perturbed: float


def generate_perturbation(model: PromptModel, ids: np.ndarray, labels: np.ndarray, spec,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """Perturbed (ids, embedding delta) for a batch; delta is None for text edits."""
    v = model.vocab
    if isinstance(spec, RGSpec):
        with T.no_grad():
            E = model.embed(ids).data
        E2 = rg_perturb(E, spec, rng, valid=ids != v.pad_id, clip=True)
        return ids, E2 - E
    if isinstance(spec, RMSpec):
        return rm_perturb(ids, spec, rng, v.mask_id, (v.pad_id, v.cls_id), clip=True), None
    if isinstance(spec, PGDSpec):
        with T.no_grad():
            E = model.embed(ids).data
        return ids, pgd_perturb(model, ids, labels, spec, E_s=E) - E
    if isinstance(spec, A2TSpec):
        with model.parameters_frozen():
            out = a2t_perturb_batch(model, ids, labels, spec)
        model.zero_grad()
        return out, None
    raise TypeError(f"unknown perturbation spec {spec!r}")


def ptp_step(model: PromptModel, opt, ids, labels, spec, rng: np.random.Generator,
             observer: Callable[[str, PromptModel], None] | None = None) -> StepLosses:
    """Clean update, then perturbation (parameters frozen), then an update on it.

    The perturbed update always uses the original ``labels``.
    """
    clean = standard_step(model, opt, ids, labels)
    if observer:
        observer("before_generation", model)
    ids2, delta = generate_perturbation(model, ids, labels, spec, rng)
    if observer:
        observer("after_generation", model)
    perturbed = _update(model, opt, ids2, labels, delta)
    return StepLosses(clean, perturbed)


# ---------------------------------------------------------------------------
# evaluation


def classification_metrics(y_true, y_pred) -> dict[str, float]:
    """Accuracy and macro-F1 over the classes seen in either array."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty split")
    f1s = []
    for c in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return {"accuracy": float(np.mean(y_true == y_pred)), "macro_f1": float(np.mean(f1s))}


def evaluate(model: PromptModel, examples: list[Example], batch_size: int = 64) -> dict[str, float]:
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    preds = []
    for i in range(0, len(examples), batch_size):
        ids, _ = collate(examples[i:i + batch_size], model.vocab.pad_id)
        preds.append(model.predict(ids))
    return classification_metrics([e.label for e in examples], np.concatenate(preds))


# ---------------------------------------------------------------------------
# runs


@dataclass
class TrainResult:
    model: PromptModel
    train_loss: list[float] = field(default_factory=list)
    perturbed_loss: list[float] = field(default_factory=list)
    dev_accuracy: list[float] = field(default_factory=list)
    dev_f1: list[float] = field(default_factory=list)
    best_dev: float = float("-inf")
    best_epoch: int = -1
    test: dict[str, float] = field(default_factory=dict)
    updates: int = 0
    wall_clock: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.dev_accuracy)

    def metric_arrays(self) -> dict[str, list[float]]:
        return {"train_loss": self.train_loss, "perturbed_loss": self.perturbed_loss,
                "dev_accuracy": self.dev_accuracy, "dev_f1": self.dev_f1}


def build_model(cfg: ExperimentConfig, data: DatasetSplit, init_seed: int) -> PromptModel:
    return PromptModel(cfg.backbone, cfg.prompt, data.vocab, data.num_classes,
                       prompt_seed=init_seed, frozen=cfg.train.frozen,
                       train_head=cfg.train.train_head)


def run_streams(seed: int) -> tuple[int, np.random.Generator, np.random.Generator]:
    """(init seed, shuffle rng, perturbation rng), all derived from ``seed``."""
    init_ss, shuffle_ss, perturb_ss = np.random.SeedSequence(seed).spawn(3)
    return (int(init_ss.generate_state(1)[0]), np.random.default_rng(shuffle_ss),
            np.random.default_rng(perturb_ss))


def train_run(cfg: ExperimentConfig, data: DatasetSplit, sink=None,
              run_id: str | None = None, observer=None) -> TrainResult:
    """Train one model; the best-dev parameters are restored before returning."""
    tc = cfg.train
    if not data.train or not data.dev:
        raise ValueError("train and dev splits must be nonempty")
    run_id = run_id or f"{cfg.name}-seed{tc.seed}"
    init_seed, shuffle_rng, perturb_rng = run_streams(tc.seed)
    model = build_model(cfg, data, init_seed)
    opt = make_optimizer(model.trainable(), tc.lr, tc.optimizer)
    result = TrainResult(model=model)
    best_state = {k: v.data.copy() for k, v in model.trainable().items()}
    start = time.perf_counter()
    stale = 0

    for epoch in range(tc.epochs):
        order = shuffle_rng.permutation(len(data.train))
        clean_losses, pert_losses = [], []
        for b, lo in enumerate(range(0, len(order), tc.batch_size)):
            batch = [data.train[i] for i in order[lo:lo + tc.batch_size]]
            ids, labels = collate(batch, model.vocab.pad_id)
            try:
                if tc.perturbation is None:
                    clean_losses.append(standard_step(model, opt, ids, labels))
                else:
                    losses = ptp_step(model, opt, ids, labels, tc.perturbation, perturb_rng,
                                      observer)
                    clean_losses.append(losses.clean)
                    pert_losses.append(losses.perturbed)
            except (TrainingError, FloatingPointError) as exc:
                raise TrainingError(f"run {run_id}: epoch {epoch} batch {b}: {exc}") from exc

        dev = evaluate(model, data.dev)
        result.train_loss.append(float(np.mean(clean_losses)))
        if pert_losses:
            result.perturbed_loss.append(float(np.mean(pert_losses)))
        result.dev_accuracy.append(dev["accuracy"])
        result.dev_f1.append(dev["macro_f1"])
        if sink is not None:
            sink.write_rows([
                (run_id, epoch, "train", "loss", result.train_loss[-1]),
                (run_id, epoch, "dev", "accuracy", dev["accuracy"]),
                (run_id, epoch, "dev", "macro_f1", dev["macro_f1"]),
            ])
        if dev["accuracy"] > result.best_dev:
            result.best_dev, result.best_epoch = dev["accuracy"], epoch
            best_state = {k: v.data.copy() for k, v in model.trainable().items()}
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                log.debug("run %s: early stop at epoch %d", run_id, epoch)
                break

    for k, v in model.trainable().items():
        v.data = best_state[k]
    result.updates = opt.updates
    result.test = evaluate(model, data.test)
    result.wall_clock = time.perf_counter() - start
    return result
