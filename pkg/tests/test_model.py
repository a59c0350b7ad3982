import numpy as np
import pytest

from conftest import numeric_grad, rel_error, tiny_model
from ptplab import tensor as T
from ptplab.config import BackboneConfig, PromptConfig
from ptplab.data import VOCAB, make_task, collate
from ptplab.model import PromptModel
from ptplab.tensor import Tensor


def _gelu(v):
    return 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v ** 3)))


def _ln(v, w, b, eps=1e-5):
    mu = v.mean(-1, keepdims=True)
    var = ((v - mu) ** 2).mean(-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps) * w + b


def test_embed_examples():
    m = tiny_model()
    assert m.embed([]).shape == (0, 8)
    k = VOCAB.id("w5")
    rows = m.embed([k, k]).data
    assert np.array_equal(rows[0], rows[1])
    with pytest.raises(IndexError):
        m.embed([len(VOCAB)])
    with pytest.raises(ValueError):
        m.embed([5] * 23)


def test_embed_gradient_finite_differences():
    m = tiny_model(layers=2)
    ids = np.array([2, VOCAB.id("kpos1")])
    base = m.embed(ids).data.copy()
    E = Tensor(base, requires_grad=True)
    with m.parameters_frozen():
        T.backward(m.loss(ids, 1, E_s=E))
    num = numeric_grad(lambda: m.loss(ids, 1, E_s=Tensor(base)).item(), base)
    assert rel_error(E.grad, num) <= 1e-4


def test_compose_rows_and_identity_reparam():
    m = tiny_model(length=1)
    E_s = m.embed([2, 10])
    inp = m.compose(E_s)
    assert inp.x.shape == (1, 3, 8)
    assert np.array_equal(inp.x.data[0, 0], m.prompt["block0"].data[0])
    assert np.array_equal(inp.x.data[0, 1:], E_s.data)


def test_compose_batch_shares_prompt_rows():
    m = tiny_model(length=3)
    ids = np.array([[2, 10, 11], [2, 12, 0]])
    inp = m.compose(m.embed(ids), ids=ids)
    assert np.array_equal(inp.x.data[0, :3], inp.x.data[1, :3])
    assert inp.key_mask.tolist() == [[True] * 6, [True] * 5 + [False]]


def test_mlp_reparam_matches_direct_evaluation():
    m = tiny_model(reparam="mlp", length=3)
    p = {k: v.data for k, v in m.prompt.items()}
    expect = _gelu(p["block0"] @ p["rp_w1"] + p["rp_b1"]) @ p["rp_w2"] + p["rp_b2"]
    got = m.compose(m.embed([2, 7])).x.data[0, :3]
    np.testing.assert_allclose(got, expect, rtol=1e-13, atol=1e-14)


def test_zero_head_gives_uniform_loss():
    m = PromptModel(BackboneConfig(), PromptConfig(), VOCAB, 3, zero_head=True)
    assert np.isclose(m.loss([2, 10, 11], 1).item(), np.log(3), rtol=1e-12)


def test_permutation_symmetry_without_positions():
    m = tiny_model(layers=2, use_positions=False)
    a, b = m.logits([2, 10, 11, 12]).data, m.logits([2, 12, 11, 10]).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    with_pos = tiny_model(layers=2)
    assert not np.allclose(with_pos.logits([2, 10, 11, 12]).data,
                           with_pos.logits([2, 12, 11, 10]).data)


def test_forward_matches_hand_rolled_oracle():
    bb = BackboneConfig(layers=1, dim=4, heads=1, ffn_mult=2, max_len=8)
    m = PromptModel(bb, PromptConfig(length=1), VOCAB, 2, prompt_seed=3)
    ids = [2, VOCAB.id("xa1")]
    P = {k: v.data for k, v in m.backbone.items()}
    x = np.vstack([m.prompt["block0"].data, P["tok_emb"][ids]]) + P["pos_emb"][:3]
    h = _ln(x, P["emb_ln_w"], P["emb_ln_b"])
    z = _ln(h, P["l0.ln1_w"], P["l0.ln1_b"])
    q, k, v = z @ P["l0.wq"], z @ P["l0.wk"], z @ P["l0.wv"]
    s = q @ k.T / 2.0
    att = np.exp(s - s.max(1, keepdims=True))
    att /= att.sum(1, keepdims=True)
    h = h + (att @ v) @ P["l0.wo"]
    z = _ln(h, P["l0.ln2_w"], P["l0.ln2_b"])
    h = h + _gelu(z @ P["l0.w1"] + P["l0.b1"]) @ P["l0.w2"] + P["l0.b2"]
    h = _ln(h, P["lnf_w"], P["lnf_b"])
    expect = h[1] @ m.head["head_w"].data + m.head["head_b"].data
    np.testing.assert_allclose(m.logits(ids).data, expect, rtol=1e-12, atol=1e-14)


def test_predict_argmax_and_ties():
    m = tiny_model()
    m.head["head_w"].data[:] = 0.0
    m.head["head_b"].data[:] = [0.1, 0.9]
    assert m.predict([2, 10]) == 1
    m.head["head_b"].data[:] = [0.5, 0.5]
    assert m.predict([2, 10]) == 0
    real = tiny_model(layers=2, seed=4)
    rng = np.random.default_rng(0)
    ids = rng.integers(4, len(VOCAB), (100, 6))
    ids[:, 0] = 2
    with T.no_grad():
        z = real.logits(ids).data
    assert np.array_equal(real.predict(ids), np.argmax(z, axis=1))


def test_prefix_mode_degenerates_to_prepend_with_one_layer():
    a = tiny_model(layers=1, mode="input_prepend", seed=5)
    b = tiny_model(layers=1, mode="per_layer_prefix", seed=5)
    ids = np.array([[2, 10, 11, 12], [2, 30, 31, 0]])
    np.testing.assert_array_equal(a.logits(ids).data, b.logits(ids).data)


def test_prefix_blocks_feed_deeper_layers():
    m = tiny_model(layers=2, mode="per_layer_prefix")
    ids = [2, 10, 11]
    before = m.logits(ids).data.copy()
    m.prompt["block1"].data += np.random.default_rng(0).normal(size=(2, 8))
    assert not np.allclose(before, m.logits(ids).data)


@pytest.mark.parametrize("mode,reparam", [("input_prepend", "identity"),
                                          ("per_layer_prefix", "identity"),
                                          ("input_prepend", "mlp"),
                                          ("per_layer_prefix", "mlp")])
def test_trainable_count_is_exact(mode, reparam):
    bb = BackboneConfig()
    pc = PromptConfig(mode=mode, reparam=reparam, length=4, hidden=16)
    m = PromptModel(bb, pc, VOCAB, 2)
    m_, d = 4, bb.dim
    blocks = bb.layers if mode == "per_layer_prefix" else 1
    expect = blocks * m_ * d + d * 2 + 2
    if reparam == "mlp":
        expect += d * 16 + 16 + 16 * d + d
    assert m.num_trainable() == expect
    assert m.num_trainable() * 20 < m.num_backbone()
    head_less = PromptModel(bb, pc, VOCAB, 2, train_head=False)
    assert head_less.num_trainable() == expect - (d * 2 + 2)


def test_logits_finite_on_corpus():
    m = PromptModel(BackboneConfig(), PromptConfig(), VOCAB, 2)
    for task in ("keyword", "xor"):
        ids, _ = collate(make_task(task, 1, (8, 8, 64)).test)
        assert np.all(np.isfinite(m.logits(ids).data))


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = tiny_model(layers=2, mode="per_layer_prefix", reparam="mlp")
    for t in m.all_parameters().values():
        t.data = t.data + np.random.default_rng(1).normal(size=t.shape) * 1e-3
    m.save(tmp_path / "ck.npz")
    back = PromptModel.load(tmp_path / "ck.npz")
    a, b = m.state_arrays(), back.state_arrays()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert back.backbone_checksum() == m.backbone_checksum()
    assert back.prompt_cfg == m.prompt_cfg and back.cfg == m.cfg


def test_frozen_flags():
    m = tiny_model()
    assert not any(t.requires_grad for t in m.backbone.values())
    assert all(t.requires_grad for t in m.prompt.values())
    unfrozen = tiny_model(frozen=False)
    assert all(t.requires_grad for t in unfrozen.backbone.values())
    assert set(unfrozen.trainable()) == set(unfrozen.all_parameters())
