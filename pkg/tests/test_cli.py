import json

import pytest

from dialectid.cli import main, parse_override, resolve_config
from dialectid.corpus import RawExample, write_tsv
from dialectid.encoder import ConfigError
from dialectid.synthetic import make_corpus

TINY = {"num_layers": 1, "hidden": 8, "heads": 2, "ffn_dim": 16, "adapter_bottleneck": 4, "batch_size": 8,
        "eval_every": 5, "warmup_steps": 5, "max_steps": 10, "lr_rest": 1e-2, "max_len": 16}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


@pytest.fixture
def workspace(tmp_path, capsys):
    write_tsv(tmp_path / "train.tsv", make_corpus(40, 3, seed=0, lexicon_seed=0, id_prefix="tr"))
    write_tsv(tmp_path / "dev.tsv", make_corpus(18, 3, seed=1, lexicon_seed=0, id_prefix="dv"))
    code, _, _ = run(capsys, "build-vocab", "--corpus", tmp_path / "train.tsv", "--size", 120,
                     "--out", tmp_path / "vocab.txt")
    assert code == 0
    cfg = {**TINY, "train_path": str(tmp_path / "train.tsv"), "dev_path": str(tmp_path / "dev.tsv"),
           "vocab_path": str(tmp_path / "vocab.txt")}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    return tmp_path


def test_parse_override():
    assert parse_override("lr_rest=1e-3") == ("lr_rest", 1e-3)
    assert parse_override("schedule=linear") == ("schedule", "linear")
    assert parse_override("max_steps=null") == ("max_steps", None)
    with pytest.raises(ConfigError):
        parse_override("nonsense")


def test_resolve_collects_every_problem(workspace):
    with pytest.raises(ConfigError) as info:
        resolve_config({"train_path": str(workspace / "missing.tsv"), "hidden": 30, "heads": 4,
                        "lr_head": -1, "bogus": 1}, {})
    text = " | ".join(info.value.problems)
    for needle in ("missing.tsv", "dev_path", "vocab_path", "divisible", "lr_head", "bogus"):
        assert needle in text


def test_preset_precedence(workspace):
    base = json.loads((workspace / "cfg.json").read_text())
    del base["max_len"]
    assert resolve_config(base, {})["max_len"] == 90
    assert resolve_config(base, {"preset": "msa"})["max_len"] == 110
    assert resolve_config({**base, "preset": "msa", "max_len": 50}, {})["max_len"] == 50
    assert resolve_config({**base, "max_len": 50}, {"max_len": 40})["max_len"] == 40


def test_stats(workspace, capsys):
    code, out, _ = run(capsys, "stats", "--corpus", workspace / "train.tsv")
    assert code == 0 and out["total"] == 40


def test_full_pipeline(workspace, capsys):
    runs = []
    for name in ("a", "b"):
        code, out, err = run(capsys, "train", "--config", workspace / "cfg.json", "--run-dir", workspace / name,
                             "--set", f"seed={len(runs)}")
        assert code == 0, err
        assert out["steps"] == 10
        runs.append(workspace / name)
    for f in ("config.resolved.json", "train_log.jsonl", "dev_report.json", "checkpoint/manifest.json"):
        assert (runs[0] / f).is_file()
    assert len((runs[0] / "train_log.jsonl").read_text().splitlines()) == 2

    preds = []
    for r in runs:
        code, out, _ = run(capsys, "predict", "--checkpoint", r / "checkpoint", "--data", workspace / "dev.tsv",
                           "--out", r / "preds.jsonl")
        assert code == 0 and out["n"] == 18
        preds.append(r / "preds.jsonl")

    code, out, _ = run(capsys, "ensemble", *preds, "--out", workspace / "ens.jsonl",
                       "--report", workspace / "ens_report.json")
    assert code == 0
    report = json.loads((workspace / "ens_report.json").read_text())
    assert len(report["members"]) == 2 and report["macro_f1"] == out["macro_f1"]

    code, _, _ = run(capsys, "analyze", "--predictions", workspace / "ens.jsonl", "--corpus",
                     workspace / "dev.tsv", "--out", workspace / "analysis.json")
    assert code == 0
    analysis = json.loads((workspace / "analysis.json").read_text())
    assert {"confusion", "erlang", "histogram", "notices"} <= set(analysis)


def test_single_member_ensemble_is_identity(workspace, capsys):
    assert run(capsys, "train", "--config", workspace / "cfg.json", "--run-dir", workspace / "r")[0] == 0
    run(capsys, "predict", "--checkpoint", workspace / "r/checkpoint", "--data", workspace / "dev.tsv",
        "--out", workspace / "p.jsonl")
    assert run(capsys, "ensemble", workspace / "p.jsonl", "--out", workspace / "e.jsonl")[0] == 0
    assert (workspace / "p.jsonl").read_bytes() == (workspace / "e.jsonl").read_bytes()


def test_train_reports_config_errors_as_json(workspace, capsys):
    code, _, err = run(capsys, "train", "--config", workspace / "cfg.json", "--set", "hidden=30",
                       "--set", "heads=4", "--set", "patience=0")
    assert code != 0
    assert err["error"] == "ConfigError" and len(err["problems"]) == 2


def test_predict_label_mismatch(workspace, capsys):
    assert run(capsys, "train", "--config", workspace / "cfg.json", "--run-dir", workspace / "r")[0] == 0
    write_tsv(workspace / "other.tsv", [RawExample("x1", "hello there", "unseen_label")])
    code, _, err = run(capsys, "predict", "--checkpoint", workspace / "r/checkpoint", "--data",
                       workspace / "other.tsv", "--out", workspace / "o.jsonl")
    assert code != 0 and "unseen_label" in err["message"]


def test_ensemble_misaligned_files(tmp_path, capsys):
    a = '{"id": "1", "gold": "a", "probs": {"a": 0.6, "b": 0.4}, "pred": "a"}\n'
    b = '{"id": "2", "gold": "a", "probs": {"a": 0.6, "b": 0.4}, "pred": "a"}\n'
    (tmp_path / "a.jsonl").write_text(a)
    (tmp_path / "b.jsonl").write_text(b)
    code, _, err = run(capsys, "ensemble", tmp_path / "a.jsonl", tmp_path / "b.jsonl", "--out", tmp_path / "e")
    assert code != 0 and err["error"] == "EvalError"


def test_analyze_missing_ids(workspace, capsys):
    rec = '{"id": "ghost", "gold": "class_0", "probs": {"class_0": 1.0}, "pred": "class_0"}\n'
    (workspace / "p.jsonl").write_text(rec)
    code, _, err = run(capsys, "analyze", "--predictions", workspace / "p.jsonl", "--corpus",
                       workspace / "dev.tsv", "--out", workspace / "a.json")
    assert code != 0 and "ghost" in err["message"]


def test_missing_corpus_file(tmp_path, capsys):
    code, _, err = run(capsys, "stats", "--corpus", tmp_path / "none.tsv")
    assert code != 0 and "error" in err
