import numpy as np
import pytest

from ptplab import tensor as T
from ptplab.config import BackboneConfig, PromptConfig
from ptplab.data import VOCAB
from ptplab.model import PromptModel
from ptplab.tensor import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def tiny_model(layers=1, dim=8, heads=2, mode="input_prepend", reparam="identity", length=2,
               frozen=True, seed=0, **kw) -> PromptModel:
    bb = BackboneConfig(layers=layers, dim=dim, heads=heads, ffn_mult=2, max_len=24, **kw)
    pc = PromptConfig(mode=mode, length=length, reparam=reparam, hidden=6)
    return PromptModel(bb, pc, VOCAB, 2, prompt_seed=seed, frozen=frozen)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scalar_of(fn, *tensors):
    """Run ``fn`` under no_grad and return the float result."""
    with T.no_grad():
        return float(fn(*tensors).data)


__all__ = ["numeric_grad", "rel_error", "tiny_model", "Tensor", "scalar_of"]
