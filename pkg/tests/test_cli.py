import json
import os

import pytest

from pseudomos.cli import main
from pseudomos.dataeval.manifest import Manifest, read_manifest, write_manifest

TINY = ["--widths", "2,2,2,2", "--head-hidden", "4", "--crop-frames", "24", "--batch-size", "8",
        "--lr", "1e-3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-clean", "--out", str(root / "clean"), "--n", "3", "--duration", "0.6"]) == 0
    assert main(["build", "--clean-dir", str(root / "clean"), "--out", str(root / "data"),
                 "--n", "24", "--val-fraction", "0.25", "--seed", "2"]) == 0
    for split in ("train", "val"):
        assert main(["label", "--manifest", str(root / f"data/{split}.jsonl"), "--rater", "oracle"]) == 0
    return root


def test_build_outputs(corpus, tmp_path):
    train = read_manifest(corpus / "data/train.jsonl")
    assert len(train) == 18 and len(read_manifest(corpus / "data/val.jsonl")) == 6
    assert main(["build", "--clean-dir", str(corpus / "clean"), "--out", str(tmp_path / "again"),
                 "--n", "24", "--val-fraction", "0.25", "--seed", "2"]) == 0
    for name in ("train.jsonl", "val.jsonl", "clips/clip_000005.wav"):
        assert (tmp_path / "again" / name).read_bytes() != b""
    raw = read_manifest(tmp_path / "again/train.jsonl")
    assert [r.clip_path for r in raw] == [r.clip_path for r in train]
    assert (tmp_path / "again/clips/clip_000005.wav").read_bytes() == \
        (corpus / "data/clips/clip_000005.wav").read_bytes()


def test_build_missing_clean_dir(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["build", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_build_config_file_and_unknown_key(corpus, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"dataset": {"clean_dir": str(corpus / "clean"), "out": str(tmp_path / "d"),
                                           "n": 4}}))
    assert main(["build", "--config", str(cfg), "--n", "5"]) == 0
    assert len(read_manifest(tmp_path / "d/train.jsonl")) + len(read_manifest(tmp_path / "d/val.jsonl")) == 5
    cfg.write_text(json.dumps({"dataset": {"n_clips": 4}}))
    assert main(["build", "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"optimizer": {}}))
    assert main(["build", "--config", str(cfg)]) == 2


def test_label_oracle_fully_labeled(corpus):
    m = read_manifest(corpus / "data/train.jsonl")
    assert all(r.rater == "oracle" and 1 <= r.label <= 5 for r in m)


def test_label_llm_without_endpoint(corpus, tmp_path):
    out = tmp_path / "x.jsonl"
    assert main(["label", "--manifest", str(corpus / "data/train.jsonl"), "--out", str(out),
                 "--rater", "llm"]) == 2
    assert not out.exists()


def test_label_partial_failure_exit_zero(corpus, tmp_path, caplog):
    m = read_manifest(corpus / "data/train.jsonl")
    records = list(m.records)
    records[0].condition = None
    records[0].label, records[0].rater = None, "none"
    path = tmp_path / "m.jsonl"
    # the oracle reads conditions only, so the clips need not sit next to the copy
    write_manifest(Manifest(records, m.base_dir), path)
    caplog.set_level("WARNING")
    # 1 failure out of 18 exceeds 5% but stays under the 10% budget
    assert main(["label", "--manifest", str(path), "--rater", "oracle"]) == 0
    assert "1 clips left unlabeled" in caplog.text
    assert sum(r.label is None for r in read_manifest(path)) == 1


def test_help_lists_flags_with_defaults(capsys):
    for cmd, flags in {"build": ["--clean-dir", "--n", "(default: 1000)", "--seed"],
                       "label": ["--rater", "--endpoint", "--concurrency", "(default: 4)"],
                       "train": ["--runs", "--epochs", "--lr", "(default: 0.0001)", "(default: 64)"],
                       "finetune": ["--checkpoint", "(default: 10)"],
                       "eval": ["--test", "--checkpoint"], "report": ["--row", "--metric"]}.items():
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text, (cmd, flag)


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus / "runs"
    args = ["train", "--train-manifest", str(corpus / "data/train.jsonl"),
            "--val-manifest", str(corpus / "data/val.jsonl"), "--out", str(out),
            "--epochs", "2", "--runs", "2", "--seed", "7"] + TINY
    assert main(args) == 0
    return out, args


def test_train_runs(trained, capsys):
    out, args = trained
    assert sorted(d for d in os.listdir(out) if d.startswith("run_")) == ["run_00", "run_01"]
    seeds = [json.load(open(out / f"run_0{i}/config.json"))["train"]["seed"] for i in range(2)]
    assert seeds == [7, 8]
    echo = json.load(open(out / "resolved_config.json"))
    assert echo["train"]["epochs"] == 2 and echo["model"]["widths"] == [2, 2, 2, 2]
    before = (out / "run_00/best/weights.bin").read_bytes()
    assert main(args) == 0
    assert "already complete" in capsys.readouterr().out
    assert (out / "run_00/best/weights.bin").read_bytes() == before


def test_finetune_defaults(corpus, trained):
    out, _ = trained
    ft = corpus / "ft"
    assert main(["finetune", "--checkpoint", str(out), "--train-manifest", str(corpus / "data/train.jsonl"),
                 "--val-manifest", str(corpus / "data/val.jsonl"), "--out", str(ft),
                 "--crop-frames", "24", "--batch-size", "8"]) == 0
    for i in range(2):
        cfg = json.load(open(ft / f"run_0{i}/config.json"))
        assert cfg["epochs"] == 10 and cfg["train"]["dropout_enabled"] is False
        assert cfg["model"]["dropout_rate"] == 0.0
        assert len(open(ft / f"run_0{i}/metrics.jsonl").read().splitlines()) == 10


def test_finetune_kind_mismatch(corpus, trained, tmp_path):
    out, _ = trained
    assert main(["finetune", "--checkpoint", str(out / "run_00"), "--model-kind", "deepmos",
                 "--train-manifest", str(corpus / "data/train.jsonl"),
                 "--val-manifest", str(corpus / "data/val.jsonl"), "--out", str(tmp_path)]) == 2


def test_eval_and_report(corpus, trained, tmp_path, capsys):
    out, _ = trained
    test_m = corpus / "data/val.jsonl"
    rep = tmp_path / "agg.json"
    assert main(["eval", "--checkpoint", str(out), "--test", f"SIM={test_m}", "--test", f"AUG={test_m}",
                 "--strategy", "tiny", "--out", str(rep)]) == 0
    doc = json.load(open(rep))
    assert list(doc["datasets"]) == ["SIM", "AUG"] and len(doc["runs"]) == 2 and doc["seeds"] == [7, 8]
    assert (out / "run_00/eval.json").exists()
    capsys.readouterr()
    table = tmp_path / "table.txt"
    assert main(["report", "--row", f"tiny={rep}", "--row", f"again={rep}", "--title", "PCC",
                 "--out", str(table)]) == 0
    text = capsys.readouterr().out
    assert text == table.read_text()
    lines = text.splitlines()
    assert lines[0] == "PCC" and lines[1].startswith("Training data ↓ / Test data →")
    assert lines[3].startswith("tiny") and lines[4].startswith("again") and "±" in lines[3]


def test_eval_missing_checkpoint(corpus, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"),
                 "--test", f"A={corpus / 'data/val.jsonl'}"]) == 1
