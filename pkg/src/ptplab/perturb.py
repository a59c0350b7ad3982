"""Perturbation operators: Gaussian rows, random [MASK], PGD and greedy word swaps.

Embedding-space operators take and return plain arrays shaped (n, d) or
(B, n, d); text-space operators take and return id sequences. None of
them mutates its arguments or the model's parameters.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .config import A2TSpec, PGDSpec, RGSpec, RMSpec
from .tensor import Tensor

__all__ = [
    "NumericError",
    "rg_perturb",
    "rm_perturb",
    "linf_project",
    "pgd_ascent",
    "pgd_perturb",
    "word_importance",
    "candidate_substitutes",
    "sentence_similarity",
    "a2t_perturb",
]


class NumericError(FloatingPointError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


# ---------------------------------------------------------------------------
# random noise


def rg_perturb(E_s: np.ndarray, spec: RGSpec, rng: np.random.Generator,
               valid: np.ndarray | None = None, clip: bool = False) -> np.ndarray:
    """Add N(0, sigma^2 I) to ``spec.count`` distinct rows chosen uniformly.

    ``valid`` marks eligible rows (padding excluded). With ``clip`` the
    count is reduced to the number of eligible rows instead of raising.
    """
    E_s = np.asarray(E_s, dtype=np.float64)
    if E_s.ndim == 3:
        valid = np.ones(E_s.shape[:2], bool) if valid is None else valid
        return np.stack([rg_perturb(e, spec, rng, v, clip) for e, v in zip(E_s, valid)])
    rows = np.flatnonzero(np.ones(len(E_s), bool) if valid is None else valid)
    count = spec.count
    if count > len(rows):
        if not clip:
            raise ValueError(f"cannot perturb {count} rows of a {len(rows)}-row input")
        count = len(rows)
    out = E_s.copy()
    if count == 0 or spec.sigma == 0:
        return out
    chosen = rng.choice(rows, size=count, replace=False)
    out[chosen] += rng.normal(0.0, spec.sigma, (count, E_s.shape[1]))
    return out


def rm_perturb(s, spec: RMSpec, rng: np.random.Generator, mask_id: int = 1,
               protected=(0, 2), clip: bool = False) -> np.ndarray:
    """Replace ``spec.count`` distinct positions with ``mask_id``.

    Positions holding a ``protected`` id ([PAD], [CLS]) are never chosen.
    Accepts one sequence (n,) or a padded batch (B, n).
    """
    s = np.asarray(s, dtype=np.int64)
    if s.ndim == 2:
        return np.stack([rm_perturb(row, spec, rng, mask_id, protected, clip) for row in s])
    maskable = np.flatnonzero(~np.isin(s, list(protected)))
    count = spec.count
    if count > len(maskable):
        if not clip:
            raise ValueError(f"cannot mask {count} of {len(maskable)} maskable positions")
        count = len(maskable)
    out = s.copy()
    if count:
        out[rng.choice(maskable, size=count, replace=False)] = mask_id
    return out


# ---------------------------------------------------------------------------
# PGD


def linf_project(delta: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(delta, -eps, eps)


def pgd_ascent(loss_fn: Callable[[Tensor], Tensor], E_s: np.ndarray, spec: PGDSpec,
               on_iter: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Projected gradient ascent on ``loss_fn`` around ``E_s``, starting at delta=0.

    ``loss_fn`` maps the perturbed embeddings (a Tensor) to a scalar loss.
    ``on_iter(k, delta)`` observes the iterate after each projection.
    """
    E_s = np.asarray(E_s, dtype=np.float64)
    delta = np.zeros_like(E_s)
    for k in range(1, spec.iters + 1):
        d = Tensor(delta, requires_grad=True)
        loss = loss_fn(T.add(Tensor(E_s), d))
        T.backward(loss)
        g = d.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at PGD iteration {k}", k)
        step = spec.alpha * np.sign(g) if spec.use_sign else spec.alpha * g
        delta = linf_project(delta + step, spec.eps)
        if on_iter is not None:
            on_iter(k, delta)
    return E_s + delta


def pgd_perturb(model, ids, labels, spec: PGDSpec, E_s: np.ndarray | None = None,
                on_iter=None) -> np.ndarray:
    """Adversarial input embeddings E_s + delta for a batch.

    Model and prompt parameters record no gradient while the attack runs;
    all gradient buffers are zeroed afterwards.
    """
    if E_s is None:
        with T.no_grad():
            E_s = model.embed(ids).data
    with model.parameters_frozen():
        out = pgd_ascent(lambda e: model.loss(ids, labels, E_s=e), E_s, spec, on_iter)
    model.zero_grad()
    return out


# ---------------------------------------------------------------------------
# word substitution


def _excluded(model, s: np.ndarray) -> np.ndarray:
    v = model.vocab
    return np.isin(s, [v.cls_id, v.mask_id, v.pad_id])


def word_importance(model, s, y: int, key_mask=None) -> list[int]:
    """Positions ordered by descending L2 norm of dL/d(embedding row)."""
    s = np.asarray(s, dtype=np.int64)
    norms = _row_grad_norms(model, s, y, key_mask)
    keep = np.flatnonzero(~_excluded(model, s))
    # stable: equal norms keep positional order
    order = sorted(keep, key=lambda i: -norms[i])
    return [int(i) for i in order]


def _row_grad_norms(model, s, y, key_mask=None) -> np.ndarray:
    with T.no_grad():
        base = model.embed(s).data
    with model.parameters_frozen():
        E = Tensor(base, requires_grad=True)
        loss = model.loss(s, [y], E_s=_batch1(E), key_mask=key_mask)
        T.backward(loss)
    model.zero_grad()
    return np.linalg.norm(E.grad, axis=-1)


def _batch1(E: Tensor) -> Tensor:
    return T.reshape(E, (1,) + E.shape)


def candidate_substitutes(table: np.ndarray, token: int, knn: int,
                          reserved=frozenset({0, 1, 2, 3})) -> list[int]:
    """The ``knn`` nearest non-reserved tokens by cosine similarity."""
    if token in reserved:
        raise ValueError(f"token id {token} is reserved")
    if knn <= 0:
        return []
    norms = np.linalg.norm(table, axis=1)
    sims = table @ table[token] / (norms * norms[token] + 1e-300)
    sims[list(reserved)] = -np.inf
    sims[token] = -np.inf
    order = np.lexsort((np.arange(len(sims)), -sims))
    pool = [int(i) for i in order if np.isfinite(sims[i])]
    return pool[:knn]


def sentence_similarity(table: np.ndarray, s, s2, pad_id: int = 0) -> float:
    """Cosine of mean-pooled (non-pad) embedding rows of two sequences."""
    a = _mean_pool(table, s, pad_id)
    b = _mean_pool(table, s2, pad_id)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _mean_pool(table, s, pad_id):
    s = np.asarray(s)
    return table[s[s != pad_id]].mean(axis=0)


def _per_example_loss(model, batch_ids: np.ndarray, y: int) -> np.ndarray:
    with T.no_grad():
        z = model.logits(batch_ids).data
    z = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[:, y]


def a2t_perturb(model, s, y: int, spec: A2TSpec) -> np.ndarray:
    """Greedy gradient-ordered word substitution under a similarity floor.

    Visits positions by :func:`word_importance`; at each one takes the
    candidate that raises the loss most while the mean-pooled embedding
    cosine to the original stays >= ``min_cos``. Stops once the swap
    budget is spent or the prediction no longer equals ``y``.
    """
    s = np.asarray(s, dtype=np.int64)
    table = model.backbone["tok_emb"].data
    reserved = model.vocab.reserved_ids
    n_words = int((~_excluded(model, s)).sum())
    budget = math.ceil(spec.max_swap_frac * n_words)
    current = s.copy()
    if budget == 0 or spec.knn == 0:
        return current
    cur_loss = _per_example_loss(model, current[None, :], y)[0]
    swaps = 0
    for pos in word_importance(model, s, y):
        if swaps >= budget:
            break
        cands = candidate_substitutes(table, int(s[pos]), spec.knn, reserved)
        trials, kept = [], []
        for c in cands:
            t = current.copy()
            t[pos] = c
            if sentence_similarity(table, s, t) >= spec.min_cos:
                trials.append(t)
                kept.append(c)
        if not trials:
            continue
        losses = _per_example_loss(model, np.stack(trials), y)
        best = int(np.argmax(losses))
        if losses[best] <= cur_loss:
            continue
        current = trials[best]
        cur_loss = losses[best]
        swaps += 1
        if int(model.predict(current)) != y:
            break
    return current


def a2t_perturb_batch(model, ids: np.ndarray, labels, spec: A2TSpec) -> np.ndarray:
    return np.stack([a2t_perturb(model, row, int(y), spec) for row, y in zip(ids, labels)])
