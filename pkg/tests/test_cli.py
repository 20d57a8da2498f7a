import json

import pytest

from mceiu import tensor as T
from mceiu.cli import main, parse_config_text
from mceiu.corpus.tools import split_sizes
from mceiu.errors import DataError

TINY = """
# small enough for a unit test
hidden = 8
heads = 2
kernel_widths = 1, 2
filters_per_width = 3
ff_dim = 16
epochs_pretrain = 2
epochs_train = 2
learning_rate = 0.002
n_runs = 1
synth.n_conversations = 12
dims = 6, 4, 4
lengths = (2, 4), (2, 4), (1, 3)
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


@pytest.fixture
def corpus(tmp_path, cfg):
    out = tmp_path / "corpus"
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
    return out


def test_config_text():
    c = parse_config_text(TINY + "seed = 3\nmodel.use_gate = false\n")
    assert c["model"]["kernel_widths"] == (1, 2) and c["model"]["use_gate"] is False
    assert c["synth"]["lengths"] == ((2, 4), (2, 4), (1, 3))
    assert c["train"]["seed"] == 3 and c["synth"]["seed"] == 3
    with pytest.raises(DataError, match="line 1"):
        parse_config_text("nonsense = 1")
    with pytest.raises(DataError):
        parse_config_text("just words")


def test_usage_errors(capsys, tmp_path):
    assert main(["bogus"]) == 2
    assert main(["train", "--frobnicate"]) == 2
    assert main(["train", "--out", str(tmp_path / "x")]) == 2
    assert "--corpus is required" in capsys.readouterr().err


def test_data_error_exit_one(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 1
    assert "DataError" in capsys.readouterr().err


def test_synth_train_eval(corpus, cfg, tmp_path, capsys):
    assert (corpus / "annotations.csv").is_file() and (corpus / "splits.json").is_file()
    out = tmp_path / "run"
    assert main(["train", "--corpus", str(corpus), "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
    for name in ("manifest.json", "model.eiup", "model.json", "train_loss.csv", "pretrain_loss.csv",
                 "valid_scores.csv", "metrics.csv", "confusion.txt"):
        assert (out / name).is_file(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["text_dim"] == 6  # inferred from the corpus
    assert manifest["config"]["train"]["focal_gamma"] == 2.0  # defaults materialised
    assert manifest["seeds"] == [7] and manifest["precision"] == "f64"
    assert main(["eval", "--corpus", str(corpus), "--checkpoint", str(out / "model.eiup"),
                 "--split", "valid", "--out", str(tmp_path / "ev")]) == 0
    assert "WAF" in capsys.readouterr().out
    assert T.get_precision() == "f64"


def test_train_is_bitwise_reproducible(corpus, cfg, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["train", "--corpus", str(corpus), "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
        runs.append(out)
    for name in ("model.eiup", "model.json", "train_loss.csv", "metrics.csv"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name


def test_pretrain_then_train(corpus, cfg, tmp_path):
    pre = tmp_path / "pre"
    assert main(["pretrain", "--corpus", str(corpus), "--config", cfg, "--out", str(pre)]) == 0
    out = tmp_path / "run"
    assert main(["train", "--corpus", str(corpus), "--config", cfg, "--pretrained", str(pre / "pretrained.eiup"),
                 "--task", "emotion", "--ablate", "history", "--out", str(out)]) == 0
    model = json.loads((out / "model.json").read_text())
    assert model["use_history"] is False and model["use_interaction"] is False
    assert not (out / "pretrain_loss.csv").exists()
    assert "intent" not in (out / "metrics.csv").read_text()


def test_dry_run_writes_only_manifest(corpus, cfg, tmp_path):
    out = tmp_path / "dry"
    assert main(["train", "--corpus", str(corpus), "--config", cfg, "--dry-run", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json"]
    assert json.loads((out / "manifest.json").read_text())["dry_run"] is True


def test_inputs_not_mutated(corpus, cfg, tmp_path):
    before = {p: p.read_bytes() for p in corpus.rglob("*") if p.is_file()}
    main(["split", "--corpus", str(corpus), "--out", str(tmp_path / "s")])
    main(["stats", "--corpus", str(corpus), "--out", str(tmp_path / "st")])
    assert {p: p.read_bytes() for p in corpus.rglob("*") if p.is_file()} == before


def test_corpus_tool_commands(corpus, tmp_path, capsys):
    assert main(["split", "--corpus", str(corpus), "--seed", "1", "--out", str(tmp_path / "s")]) == 0
    splits = json.loads((tmp_path / "s" / "splits.json").read_text())
    assert [len(splits[k]) for k in ("train", "valid", "test")] == split_sizes(12, (7, 1, 2))
    assert sorted(sum(splits.values(), [])) == list(range(12))
    assert main(["corr", "--csv", str(corpus / "annotations.csv"), "--out", str(tmp_path / "c")]) == 0
    rows = (tmp_path / "c" / "correlation.csv").read_text().splitlines()[1:]
    assert sum(int(x) for r in rows for x in r.split(",")[1:]) == 96
    assert main(["stats", "--corpus", str(corpus), "--out", str(tmp_path / "st")]) == 0
    assert "# Conversations" in (tmp_path / "st" / "stats.txt").read_text()


def test_vote_and_kappa(tmp_path, capsys):
    perfect = tmp_path / "perfect.csv"
    perfect.write_text("Dia_No,Utt_No,A1,A2,A3\n0,0,happy,happy,happy\n0,1,sad,sad,sad\n")
    assert main(["kappa", "--csv", str(perfect), "--out", str(tmp_path / "k")]) == 0
    assert "κ = 1.0" in capsys.readouterr().out
    mixed = tmp_path / "mixed.csv"
    mixed.write_text("Dia_No,Utt_No,A1,A2,A3,Expert\n0,0,happy,happy,sad,\n0,1,happy,sad,anger,fear\n0,2,happy,sad,anger,\n")
    assert main(["vote", "--csv", str(mixed), "--out", str(tmp_path / "v")]) == 0
    lines = (tmp_path / "v" / "final_labels.csv").read_text().splitlines()
    assert lines[1:] == ["0,0,happy,majority", "0,1,fear,expert", "0,2,,unresolved"]
    bad = tmp_path / "bad.csv"
    bad.write_text("Dia_No,Utt_No,A1,A2,A3\n0,0,happy,joyful,sad\n")
    assert main(["vote", "--csv", str(bad), "--vocab", "emotion", "--out", str(tmp_path / "b")]) == 1


def test_parse_subs(tmp_path):
    srt = tmp_path / "ep.srt"
    srt.write_text("1\n00:24:09,900 --> 00:24:12,530\nTurns out\nit fits.\n")
    assert main(["parse-subs", "--subs", str(srt), "--out", str(tmp_path / "p")]) == 0
    text = (tmp_path / "p" / "subtitles.csv").read_text()
    assert "1449900,1452530,Turns out it fits." in text
    srt.write_text("1\n00:24:09 --> 00:24:12,530\nx\n")
    assert main(["parse-subs", "--subs", str(srt), "--out", str(tmp_path / "q")]) == 1


def test_ablate_report_has_fifteen_rows(corpus, cfg, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--corpus", str(corpus), "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()[1:]
    assert len({r.split(",")[0] for r in rows}) == 15
    text = (out / "ablation.txt").read_text()
    assert "42.09" in text and "Interaction benefit" in text


def test_gradcheck_dry_run(tmp_path):
    assert main(["gradcheck", "--dry-run", "--out", str(tmp_path / "g")]) == 0
