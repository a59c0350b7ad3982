"""Miniature transformer encoder with a frozen backbone and trainable prompts.

Layout of the composed sequence::

    positions 0..m-1   prompt rows E_T
    position  m        [CLS]
    positions m+1..    remaining input tokens (right-padded with [PAD])

The classification head reads the final hidden state at the [CLS] slot.
In ``per_layer_prefix`` mode, block 0 is the prepended input prompt and
block l >= 1 replaces the prompt-row hidden states entering layer l, so
every layer attends to its own trainable key/value prefix.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import BackboneConfig, PromptConfig
from .tensor import Tensor
from .vocab import Vocabulary

CHECKPOINT_VERSION = 1
NEG_INF = -1e9


@dataclass
class ComposedInput:
    """[E_T; E_s] plus what the encoder needs to run on it."""

    x: Tensor                 # (B, m+n, d)
    key_mask: np.ndarray      # (B, m+n) bool, True = attendable
    prefixes: list[Tensor] = field(default_factory=list)   # blocks for layers 1..L-1
    squeeze: bool = False     # input was a single unbatched sequence

    @property
    def rows(self) -> int:
        return self.x.shape[1]


class PromptModel:
    """Frozen backbone, trainable prompt state and a linear head on [CLS]."""

    def __init__(self, backbone: BackboneConfig, prompt: PromptConfig, vocab: Vocabulary,
                 num_classes: int, prompt_seed: int = 0, frozen: bool = True,
                 train_head: bool = True, zero_head: bool = False):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.cfg = backbone
        self.prompt_cfg = prompt
        self.vocab = vocab
        self.num_classes = num_classes
        self.frozen = frozen
        self.train_head = train_head
        self.backbone = self._init_backbone(np.random.default_rng(backbone.seed))
        rng = np.random.default_rng(prompt_seed)
        self.prompt = self._init_prompt(rng)
        self.head = self._init_head(rng, zero_head)
        self._set_requires_grad()

    # -- initialization -------------------------------------------------

    def _init_backbone(self, rng) -> dict[str, Tensor]:
        c = self.cfg
        d, f = c.dim, c.dim * c.ffn_mult
        std = c.init_std

        def w(n_in, n_out):
            return Tensor(rng.normal(0.0, c.weight_gain / np.sqrt(n_in), (n_in, n_out)))

        p = {
            "tok_emb": Tensor(self._init_token_table(rng)),
            "pos_emb": Tensor(rng.normal(0.0, std, (c.max_len, d))),
            "emb_ln_w": Tensor(np.ones(d)),
            "emb_ln_b": Tensor(np.zeros(d)),
        }
        for layer in range(c.layers):
            pre = f"l{layer}."
            p[pre + "ln1_w"] = Tensor(np.ones(d))
            p[pre + "ln1_b"] = Tensor(np.zeros(d))
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = w(d, d)
            p[pre + "ln2_w"] = Tensor(np.ones(d))
            p[pre + "ln2_b"] = Tensor(np.zeros(d))
            p[pre + "w1"] = w(d, f)
            p[pre + "b1"] = Tensor(np.zeros(f))
            p[pre + "w2"] = w(f, d)
            p[pre + "b2"] = Tensor(np.zeros(d))
        p["lnf_w"] = Tensor(np.ones(d))
        p["lnf_b"] = Tensor(np.zeros(d))
        return p

    def _init_token_table(self, rng) -> np.ndarray:
        """N(0, init_std^2) rows; rows in one lexical cluster share a fraction
        ``cluster_share`` of their variance through a common centroid."""
        c, V = self.cfg, len(self.vocab)
        noise = rng.normal(0.0, c.init_std, (V, c.dim))
        groups = self.vocab.groups
        if groups is None or c.cluster_share == 0:
            return noise
        groups = np.asarray(groups)
        centroids = rng.normal(0.0, c.init_std, (groups.max() + 1, c.dim))
        rho = c.cluster_share
        return np.sqrt(rho) * centroids[groups] + np.sqrt(1.0 - rho) * noise

    def _init_prompt(self, rng) -> dict[str, Tensor]:
        pc, d = self.prompt_cfg, self.cfg.dim
        blocks = self.cfg.layers if pc.mode == "per_layer_prefix" else 1
        p = {f"block{b}": Tensor(rng.normal(0.0, pc.init_std, (pc.length, d)))
             for b in range(blocks)}
        if pc.reparam == "mlp":
            h = pc.hidden
            p["rp_w1"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, h)))
            p["rp_b1"] = Tensor(np.zeros(h))
            p["rp_w2"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(h), (h, d)))
            p["rp_b2"] = Tensor(np.zeros(d))
        return p

    def _init_head(self, rng, zero: bool) -> dict[str, Tensor]:
        d, k = self.cfg.dim, self.num_classes
        wgt = np.zeros((d, k)) if zero else rng.normal(0.0, 1.0 / np.sqrt(d), (d, k))
        return {"head_w": Tensor(wgt), "head_b": Tensor(np.zeros(k))}

    def _set_requires_grad(self) -> None:
        for t in self.prompt.values():
            _enable(t, True)
        for t in self.head.values():
            _enable(t, self.train_head or not self.frozen)
        for t in self.backbone.values():
            _enable(t, not self.frozen)

    # -- parameter groups ------------------------------------------------

    @property
    def prompt_len(self) -> int:
        return self.prompt_cfg.length

    def trainable(self) -> dict[str, Tensor]:
        groups = {**{"prompt/" + k: v for k, v in self.prompt.items()}}
        if self.train_head or not self.frozen:
            groups.update({"head/" + k: v for k, v in self.head.items()})
        if not self.frozen:
            groups.update({"backbone/" + k: v for k, v in self.backbone.items()})
        return groups

    def all_parameters(self) -> dict[str, Tensor]:
        out = {"backbone/" + k: v for k, v in self.backbone.items()}
        out.update({"head/" + k: v for k, v in self.head.items()})
        out.update({"prompt/" + k: v for k, v in self.prompt.items()})
        return out

    def num_trainable(self) -> int:
        return int(sum(t.data.size for t in self.trainable().values()))

    def num_backbone(self) -> int:
        return int(sum(t.data.size for t in self.backbone.values()))

    def zero_grad(self) -> None:
        for t in self.all_parameters().values():
            t.zero_grad()

    @contextlib.contextmanager
    def parameters_frozen(self):
        """Stop every parameter from recording gradients inside the block."""
        params = list(self.all_parameters().values())
        saved = [t.requires_grad for t in params]
        for t in params:
            t.requires_grad = False
        try:
            yield
        finally:
            for t, flag in zip(params, saved):
                t.requires_grad = flag

    def backbone_checksum(self) -> str:
        return _checksum(self.backbone)

    def trainable_checksum(self) -> str:
        return _checksum(self.trainable())

    # -- forward pieces --------------------------------------------------

    def embed(self, ids) -> Tensor:
        """Word embeddings E_s for an id sequence (n,) or padded batch (B, n)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] > self.cfg.max_len - self.prompt_len:
            raise ValueError(
                f"sequence length {ids.shape[-1]} exceeds {self.cfg.max_len - self.prompt_len}"
            )
        if ids.size == 0:
            return Tensor(np.zeros(ids.shape + (self.cfg.dim,)))
        return T.embedding_lookup(self.backbone["tok_emb"], ids)

    def reparameterize(self, block: Tensor) -> Tensor:
        if self.prompt_cfg.reparam == "identity":
            return block
        p = self.prompt
        hidden = T.gelu(T.matmul(block, p["rp_w1"]) + p["rp_b1"])
        return T.matmul(hidden, p["rp_w2"]) + p["rp_b2"]

    def prompt_blocks(self) -> list[Tensor]:
        n = len([k for k in self.prompt if k.startswith("block")])
        return [self.reparameterize(self.prompt[f"block{b}"]) for b in range(n)]

    def compose(self, E_s: Tensor, ids=None, key_mask=None) -> ComposedInput:
        """Prepend the prompt block to E_s; ``ids`` supplies the [PAD] mask."""
        squeeze = E_s.ndim == 2
        if squeeze:
            E_s = T.reshape(E_s, (1,) + E_s.shape)
        bsz, n, d = E_s.shape
        blocks = self.prompt_blocks()
        m = self.prompt_len
        E_T = T.reshape(blocks[0], (1, m, d))
        if bsz > 1:
            E_T = T.add(Tensor(np.zeros((bsz, m, d))), E_T)
        x = T.concat_rows([E_T, E_s], axis=1)
        mask = np.ones((bsz, m + n), dtype=bool)
        if ids is not None:
            mask[:, m:] = np.atleast_2d(np.asarray(ids)) != self.vocab.pad_id
        if key_mask is not None:
            mask[:, m:] &= np.atleast_2d(np.asarray(key_mask, dtype=bool))
        return ComposedInput(x=x, key_mask=mask, prefixes=blocks[1:], squeeze=squeeze)

    def _attention(self, h: Tensor, layer: int, bias: np.ndarray) -> Tensor:
        p, c = self.backbone, self.cfg
        pre = f"l{layer}."
        bsz, L, d = h.shape
        hd = d // c.heads

        def heads(t):
            return T.transpose(T.reshape(t, (bsz, L, c.heads, hd)), (0, 2, 1, 3))

        q = heads(T.matmul(h, p[pre + "wq"]))
        k = heads(T.matmul(h, p[pre + "wk"]))
        v = heads(T.matmul(h, p[pre + "wv"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        att = T.softmax(T.add(scores, bias))
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (bsz, L, d))
        return T.matmul(ctx, p[pre + "wo"])

    def encode(self, inp: ComposedInput) -> Tensor:
        """Run the encoder stack; returns final hidden states (B, m+n, d)."""
        p, c = self.backbone, self.cfg
        x = inp.x
        bsz, L, d = x.shape
        if L > c.max_len:
            raise ValueError(f"composed length {L} exceeds max_len {c.max_len}")
        if c.use_positions:
            x = T.add(x, T.getitem(p["pos_emb"], slice(0, L)))
        h = T.layer_norm(x, p["emb_ln_w"], p["emb_ln_b"])
        bias = np.where(inp.key_mask, 0.0, NEG_INF)[:, None, None, :]
        m = self.prompt_len
        for layer in range(c.layers):
            if layer >= 1 and inp.prefixes:
                prefix = T.add(Tensor(np.zeros((bsz, m, d))), inp.prefixes[layer - 1])
                h = T.concat_rows([prefix, h[:, m:, :]], axis=1)
            pre = f"l{layer}."
            a = self._attention(T.layer_norm(h, p[pre + "ln1_w"], p[pre + "ln1_b"]), layer, bias)
            h = h + a
            z = T.layer_norm(h, p[pre + "ln2_w"], p[pre + "ln2_b"])
            z = T.matmul(T.gelu(T.matmul(z, p[pre + "w1"]) + p[pre + "b1"]), p[pre + "w2"])
            h = h + (z + p[pre + "b2"])
        return T.layer_norm(h, p["lnf_w"], p["lnf_b"])

    def forward(self, inp: ComposedInput) -> Tensor:
        """K-class logits read from the [CLS] slot."""
        h = self.encode(inp)
        cls = h[:, self.prompt_len, :]
        logits = T.matmul(cls, self.head["head_w"]) + self.head["head_b"]
        if inp.squeeze:
            logits = T.reshape(logits, (self.num_classes,))
        return logits

    def logits(self, ids, E_s: Tensor | None = None, key_mask=None) -> Tensor:
        """Convenience: embed (unless E_s given), compose and run forward."""
        if E_s is None:
            E_s = self.embed(ids)
        return self.forward(self.compose(E_s, ids=ids, key_mask=key_mask))

    def loss(self, ids, labels, E_s: Tensor | None = None, key_mask=None) -> Tensor:
        return T.softmax_cross_entropy(self.logits(ids, E_s, key_mask), labels)

    def predict(self, ids, E_s: Tensor | None = None) -> np.ndarray:
        with T.no_grad():
            z = self.logits(ids, E_s).data
        return np.argmax(z, axis=-1)

    # -- checkpointing ---------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.all_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.all_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "backbone": self.cfg.model_dump(),
            "prompt": self.prompt_cfg.model_dump(),
            "vocab": self.vocab.tokens,
            "groups": self.vocab.groups,
            "num_classes": self.num_classes,
            "frozen": self.frozen,
            "train_head": self.train_head,
        }
        arrays = {k: v for k, v in self.state_arrays().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "PromptModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
        model = cls(BackboneConfig(**meta["backbone"]), PromptConfig(**meta["prompt"]),
                    Vocabulary(meta["vocab"], meta.get("groups")), meta["num_classes"],
                    frozen=meta["frozen"], train_head=meta["train_head"])
        model.load_arrays(arrays)
        return model


def _enable(t: Tensor, flag: bool) -> None:
    t.requires_grad = flag
    if flag and t.grad is None:
        t.grad = np.zeros_like(t.data)


def _checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()
