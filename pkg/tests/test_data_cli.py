import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from ptplab import cli, report
from ptplab.analysis import SWEEP_KINDS
from ptplab.config import (A2TSpec, ExperimentConfig, PGDSpec, RGSpec, RMSpec, dump_config,
                           parse_config)
from ptplab.data import (KW_NEG, KW_POS, VOCAB, XOR_X, XOR_Y, gen_keyword_task, gen_xor_task,
                         keyword_label, swap_keyword_groups, tokenize, xor_label)

# -- generators -----------------------------------------------------------------


@pytest.mark.parametrize("gen", [gen_keyword_task, gen_xor_task])
def test_generators_deterministic_and_disjoint(gen):
    a, b = gen(7, (20, 20, 50)), gen(7, (20, 20, 50))
    assert a.train == b.train and a.dev == b.dev and a.test == b.test
    assert gen(8, (20, 20, 50)).train != a.train
    texts = [{e.text for e in split} for split in (a.train, a.dev, a.test)]
    assert not (texts[0] & texts[1]) and not (texts[0] & texts[2]) and not (texts[1] & texts[2])
    assert all(len(e.ids) >= 1 and e.label in (0, 1) for e in a.train + a.dev + a.test)


def test_keyword_label_flips_on_group_swap():
    for e in gen_keyword_task(1, (50, 1, 1)).train:
        words = e.text.split()
        swapped = swap_keyword_groups(words)
        assert keyword_label(swapped) == 1 - e.label
        assert [w for w in swapped if w not in KW_POS + KW_NEG] == \
            [w for w in words if w not in KW_POS + KW_NEG]


def test_keyword_counting_rule_is_perfect():
    pos = {VOCAB.id(w) for w in KW_POS}
    neg = {VOCAB.id(w) for w in KW_NEG}
    test = gen_keyword_task(2, (8, 8, 400)).test
    pred = [int(sum(t in pos for t in e.ids) > sum(t in neg for t in e.ids)) for e in test]
    assert np.mean(np.array(pred) == [e.label for e in test]) == 1.0


def test_xor_table():
    assert xor_label(["w1", XOR_X[0]]) == 1
    assert xor_label([XOR_Y[2], "w3"]) == 1
    assert xor_label(["w1", "w2"]) == 0
    assert xor_label([XOR_X[1], XOR_Y[1]]) == 0


def test_xor_class_balance():
    d = gen_xor_task(3, (1000, 1000, 1000))
    for split in (d.train, d.dev, d.test):
        assert abs(np.mean([e.label for e in split]) - 0.5) <= 0.02


def _bow(examples):
    X = np.zeros((len(examples), len(VOCAB)))
    for i, e in enumerate(examples):
        for t in e.ids:
            X[i, t] += 1
    return X, np.array([e.label for e in examples])


def test_xor_defeats_linear_bag_of_words():
    from sklearn.linear_model import LogisticRegression
    d = gen_xor_task(4, (1000, 10, 1000))
    X, y = _bow(d.train)
    Xt, yt = _bow(d.test)
    assert LogisticRegression(max_iter=2000).fit(X, y).score(Xt, yt) <= 0.60


def test_tokenize_examples():
    assert tokenize("") == [VOCAB.cls_id]
    a = VOCAB.id("w1")
    assert tokenize("W1 w1") == [VOCAB.cls_id, a, a]
    assert tokenize("zzz") == [VOCAB.cls_id, VOCAB.unk_id]
    for e in gen_keyword_task(5, (10, 1, 1)).train:
        assert tokenize(VOCAB.detokenize(e.ids)) == list(e.ids)


def test_vocabulary_invariants():
    ids = [VOCAB.id(t) for t in VOCAB.tokens]
    assert ids == list(range(len(VOCAB))) and 190 <= len(VOCAB) <= 210
    assert len({VOCAB.pad_id, VOCAB.mask_id, VOCAB.cls_id, VOCAB.unk_id}) == 4
    assert all(VOCAB.token(VOCAB.id(t)) == t for t in VOCAB.tokens)


# -- config -----------------------------------------------------------------------

spec_strategy = st.one_of(
    st.none(),
    st.builds(RGSpec, sigma=st.floats(0, 1), count=st.integers(0, 20)),
    st.builds(RMSpec, count=st.integers(0, 10)),
    st.builds(PGDSpec, alpha=st.floats(1e-6, 1), eps=st.floats(0, 1), iters=st.integers(1, 9),
              use_sign=st.booleans()),
    st.builds(A2TSpec, min_cos=st.floats(0, 1), max_swap_frac=st.floats(0, 1),
              knn=st.integers(0, 20)),
)


@settings(max_examples=60, deadline=None)
@given(spec=spec_strategy, seed=st.integers(0, 10**6), lr=st.floats(1e-6, 1),
       seeds=st.lists(st.integers(0, 1000), min_size=1, max_size=6))
def test_config_round_trip(spec, seed, lr, seeds):
    base = ExperimentConfig()
    cfg = base.model_copy(update={
        "seeds": seeds,
        "train": base.train.model_copy(update={"perturbation": spec, "seed": seed, "lr": lr}),
    })
    assert parse_config(dump_config(cfg)) == cfg


def test_config_rejects_bad_input():
    with pytest.raises(Exception):
        parse_config("schema_version: 2\n")
    with pytest.raises(Exception):
        parse_config("bogus: 1\n")
    with pytest.raises(Exception):
        parse_config("backbone: {dim: 30, heads: 4}\n")
    with pytest.raises(Exception):
        parse_config("train: {perturbation: {kind: pgd, iters: 0}}\n")
    with pytest.raises(ValueError):
        parse_config("- 1\n")


def test_committed_schema_is_current():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "docs" / "config_schema.json"
    assert json.loads(path.read_text()) == ExperimentConfig.model_json_schema()


# -- CLI ----------------------------------------------------------------------------

TINY = {"schema_version": 1, "name": "t",
        "task": {"name": "keyword", "train": 8, "dev": 8, "test": 8},
        "backbone": {"dim": 8, "heads": 2, "layers": 1},
        "train": {"epochs": 2}}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_cli_train_writes_outputs(cfg_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    for name in ("config.yaml", "metrics.tsv", "checkpoint.npz", "result.json"):
        assert (out / name).exists()
    rows = report.read_tsv(out / "metrics.tsv")
    assert len(rows) == 2 * 3 and {r["split"] for r in rows} == {"train", "dev"}
    assert json.loads((out / "result.json").read_text())["epochs"] == 2
    assert "best_dev=" in capsys.readouterr().out


def test_cli_landscape(cfg_path, tmp_path):
    run = tmp_path / "run"
    cli.main(["train", "--config", str(cfg_path), "--out", str(run)])
    out = tmp_path / "grid"
    code = cli.main(["landscape", "--checkpoint", str(run / "checkpoint.npz"), "--config",
                     str(cfg_path), "--out", str(out), "--resolution", "5", "--extent", "0.2"])
    assert code == 0
    text = (out / "grid.tsv").read_text().splitlines()
    assert text[0].startswith("# batch=") and "u_sha256=" in text[0]
    rows = report.read_tsv(out / "grid.tsv")
    assert len(rows) == 25 and set(rows[0]) == {"x", "y", "loss"}


def test_cli_seeds_and_report(cfg_path, tmp_path, capsys):
    out = tmp_path / "s"
    assert cli.main(["seeds", "--config", str(cfg_path), "--seeds", "1,2,3,4,5",
                     "--out", str(out)]) == 0
    rows = report.read_tsv(out / "seeds.tsv")
    assert len(rows) == 5 and [r["seed"] for r in rows] == ["1", "2", "3", "4", "5"]
    capsys.readouterr()
    assert cli.main(["report", "--in", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t") == ["task", "method", "n", "mean", "variance"]
    assert lines[1].split("\t")[:3] == ["keyword", "vanilla", "5"]


def test_cli_sweep_is_idempotent(cfg_path, tmp_path, capsys):
    out = tmp_path / "sw"
    args = ["sweep", "--kind", "a2t_line", "--config", str(cfg_path), "--seeds", "1,2",
            "--out", str(out)]
    assert cli.main(args) == 0
    first = (out / "sweep.tsv").read_text()
    metrics = (out / "metrics.tsv").read_text()
    assert len(report.read_tsv(out / "sweep.tsv")) == 5
    assert cli.main(args) == 0
    assert (out / "sweep.tsv").read_text() == first
    assert (out / "metrics.tsv").read_text() == metrics


def test_cli_schema(tmp_path, capsys):
    assert cli.main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"] == "ExperimentConfig"


@pytest.mark.parametrize("argv", [
    [],
    ["train"],
    ["train", "--config", "nope.yaml", "--out", "x"],
    ["train", "--bogus"],
    ["seeds", "--config", "CFG", "--seeds", "1,1", "--out", "x"],
    ["seeds", "--config", "CFG", "--seeds", "a,b", "--out", "x"],
    ["sweep", "--kind", "nope", "--config", "CFG", "--out", "x"],
    ["report", "--in", "/nonexistent"],
])
def test_cli_usage_errors_exit_2(argv, cfg_path, tmp_path, capsys):
    argv = [str(cfg_path) if a == "CFG" else a for a in argv]
    argv = [str(tmp_path / a) if a == "x" else a for a in argv]
    assert cli.main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].split("\t")[:2] == ["error", "usage"]


def test_cli_schema_violation_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("schema_version: 1\ntrain: {lr: -1}\n")
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("error\tusage\tinvalid config")


def test_cli_runtime_error_exit_1(cfg_path, tmp_path, capsys):
    bad = tmp_path / "broken.npz"
    bad.write_bytes(b"not a checkpoint")
    code = cli.main(["landscape", "--checkpoint", str(bad), "--config", str(cfg_path),
                     "--out", str(tmp_path / "g")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error\truntime\t")


# -- report tables ------------------------------------------------------------------


def _fake_sweep(kind, path):
    from ptplab.analysis import RunReport, SweepCell, sweep_cells
    sink = report.TsvSink(path, report.SWEEP_HEADER)
    base = SweepCell("baseline", "", "", None, RunReport("t", "vanilla", [1, 2], [0.5, 0.6]))
    sink.write_rows([report.sweep_row(kind, base, None)])
    for i, (cid, row, col, spec) in enumerate(sweep_cells(kind, ExperimentConfig())):
        cell = SweepCell(cid, row, col, spec, RunReport("t", kind, [1, 2], [0.5 + i / 100] * 2))
        sink.write_rows([report.sweep_row(kind, cell, base.mean)])


@pytest.mark.parametrize("kind,shape", [("rg_grid", (3, 4)), ("pgd_grid", (3, 5)),
                                        ("rm_line", (1, 10)), ("a2t_line", (1, 4))])
def test_report_reproduces_table_shapes(kind, shape, tmp_path):
    _fake_sweep(kind, tmp_path / "sweep.tsv")
    table = report.sweep_table(report.read_tsv(tmp_path / "sweep.tsv"), kind)
    assert (len(table["cells"]), len(table["cells"][0])) == shape
    assert all(v is not None for row in table["cells"] for v in row)
    assert table["baseline"] == pytest.approx(0.55)
    text = report.format_sweep_table(table).splitlines()
    assert len(text) == shape[0] + 2 and len(text[0].split("\t")) == shape[1] + 1


def test_sweep_kinds_cover_all_tables():
    assert set(SWEEP_KINDS) == set(report.TABLE_AXES)


def test_tsv_sink_rejects_ragged_rows(tmp_path):
    sink = report.TsvSink(tmp_path / "m.tsv", report.METRICS_HEADER)
    with pytest.raises(ValueError):
        sink.write_rows([("a", 1)])
