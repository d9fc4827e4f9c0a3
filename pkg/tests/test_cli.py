from __future__ import annotations

import json
import logging

import pytest

from domainforge.cli import main
from domainforge.evaluator import McqItem, save_exam

IN_CHARS = "脉弦滑数迟细濡涩浮沉"
OUT_CHARS = "星球轨道宇宙火箭发射天"


def write_raw(path, n_in=5, n_out=5):
    lines = []
    for i in range(n_in):
        lines.append(
            {"source_id": f"in-{i}", "title": "脉诊", "body": IN_CHARS * 3}
        )
    for i in range(n_out):
        lines.append(
            {"source_id": f"out-{i}", "title": "天文", "body": OUT_CHARS * 3}
        )
    path.write_text(
        "\n".join(json.dumps(obj, ensure_ascii=False) for obj in lines) + "\n",
        encoding="utf-8",
    )


def write_samples(path):
    path.write_text(
        "脉弦滑数之象\n脉象弦滑而数者\n弦滑脉主痰饮之证\n", encoding="utf-8"
    )


def write_exam(path):
    items = [
        McqItem(
            stem=f"问题{i}",
            options=(("A", "甲"), ("B", "乙"), ("C", "丙"), ("D", "丁")),
            gold=gold,
        )
        for i, gold in enumerate(["B", "D", "A"])
    ]
    save_exam(items, path)
    return items


PRETRAIN_FLAGS = [
    "--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32",
    "--max-seq-len", "16", "--lora-rank", "2", "--lora-alpha", "4",
    "--lora-dropout", "0.0", "--learning-rate", "0.01", "--batch-size", "4",
    "--seed", "0",
]


@pytest.fixture
def workspace(tmp_path):
    write_raw(tmp_path / "raw.jsonl")
    write_samples(tmp_path / "samples.txt")
    (tmp_path / "lexicon.txt").write_text("脉象\n弦脉\n", encoding="utf-8")
    return tmp_path


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def prepare_selected_store(ws, capsys):
    assert main([
        "ingest", "--input", str(ws / "raw.jsonl"),
        "--output", str(ws / "corpus.store"), "--min-tokens", "5",
    ]) == 0
    assert main([
        "keywords", "--samples", str(ws / "samples.txt"),
        "--lexicon", str(ws / "lexicon.txt"),
        "--output", str(ws / "keywords.tsv"),
    ]) == 0
    assert main([
        "index", "--store", str(ws / "corpus.store"),
        "--output", str(ws / "corpus.idx"),
    ]) == 0
    assert main([
        "retrieve", "--index", str(ws / "corpus.idx"),
        "--store", str(ws / "corpus.store"),
        "--keywords", str(ws / "keywords.tsv"),
        "--budget", "200", "--output", str(ws / "selected.store"),
        "--provenance", str(ws / "selected.prov"),
    ]) == 0
    capsys.readouterr()


def test_full_pipeline(workspace, capsys):
    ws = workspace

    code, out, _ = run([
        "ingest", "--input", str(ws / "raw.jsonl"),
        "--output", str(ws / "corpus.store"), "--min-tokens", "5",
    ], capsys)
    assert code == 0
    assert "documents=10" in out

    code, out, _ = run([
        "keywords", "--samples", str(ws / "samples.txt"),
        "--lexicon", str(ws / "lexicon.txt"),
        "--output", str(ws / "keywords.tsv"),
    ], capsys)
    assert code == 0
    assert "keywords=" in out
    assert (ws / "keywords.tsv").read_text(encoding="utf-8").strip()

    code, out, _ = run([
        "index", "--store", str(ws / "corpus.store"),
        "--output", str(ws / "corpus.idx"),
    ], capsys)
    assert code == 0
    assert "documents=10" in out

    code, out, _ = run([
        "retrieve", "--index", str(ws / "corpus.idx"),
        "--store", str(ws / "corpus.store"),
        "--keywords", str(ws / "keywords.tsv"),
        "--budget", "200", "--output", str(ws / "selected.store"),
        "--provenance", str(ws / "selected.prov"),
    ], capsys)
    assert code == 0
    assert "selected=5" in out  # exactly the pulse-themed half
    assert (ws / "selected.prov").exists()

    code, out, _ = run([
        "pretrain", "--store", str(ws / "selected.store"),
        "--output", str(ws / "model.ckpt"), "--epochs", "1",
        *PRETRAIN_FLAGS,
    ], capsys)
    assert code == 0
    assert "steps=" in out
    assert (ws / "model.ckpt.vocab").exists()
    assert (ws / "model.ckpt.loss.tsv").exists()

    sft_data = ws / "sft.jsonl"
    sft_data.write_text(
        json.dumps({"prompt": "脉弦滑数", "response": "弦滑"}, ensure_ascii=False)
        + "\n"
        + json.dumps({"prompt": "脉迟而细", "response": "迟细"}, ensure_ascii=False)
        + "\n",
        encoding="utf-8",
    )
    code, out, _ = run([
        "sft", "--checkpoint", str(ws / "model.ckpt"),
        "--data", str(sft_data), "--output", str(ws / "tuned.ckpt"),
        "--epochs", "2", "--learning-rate", "0.005", "--batch-size", "2",
        "--seed", "0",
    ], capsys)
    assert code == 0
    assert "steps=" in out

    exam = ws / "exam.jsonl"
    write_exam(exam)
    code, out, _ = run([
        "eval", "--checkpoint", str(ws / "tuned.ckpt"), "--exam", str(exam),
        "--responder", "gold", "--output", str(ws / "report.tsv"),
    ], capsys)
    assert code == 0
    assert "accuracy=1.0000 n=3 abstain=0" in out
    assert "accuracy=1.0000" in (ws / "report.tsv").read_text(encoding="utf-8")

    code, out, _ = run([
        "eval", "--checkpoint", str(ws / "tuned.ckpt"), "--exam", str(exam),
        "--responder", "empty",
    ], capsys)
    assert code == 0
    assert "accuracy=0.0000 n=3 abstain=3" in out

    code, out, _ = run([
        "eval", "--checkpoint", str(ws / "tuned.ckpt"), "--exam", str(exam),
        "--responder", "model", "--max-new-tokens", "4",
    ], capsys)
    assert code == 0
    assert "accuracy=" in out


def test_pretrain_rerun_is_byte_identical(workspace, capsys):
    ws = workspace
    prepare_selected_store(ws, capsys)
    for name in ("one.ckpt", "two.ckpt"):
        assert main([
            "pretrain", "--store", str(ws / "selected.store"),
            "--output", str(ws / name), "--epochs", "1", *PRETRAIN_FLAGS,
        ]) == 0
    assert (ws / "one.ckpt").read_bytes() == (ws / "two.ckpt").read_bytes()
    assert (ws / "one.ckpt.vocab").read_bytes() == (ws / "two.ckpt.vocab").read_bytes()
    assert (
        (ws / "one.ckpt.loss.tsv").read_bytes()
        == (ws / "two.ckpt.loss.tsv").read_bytes()
    )


def test_pretrain_resume_matches_straight_run(workspace, capsys):
    ws = workspace
    prepare_selected_store(ws, capsys)
    assert main([
        "pretrain", "--store", str(ws / "selected.store"),
        "--output", str(ws / "straight.ckpt"), "--epochs", "2", *PRETRAIN_FLAGS,
    ]) == 0
    assert main([
        "pretrain", "--store", str(ws / "selected.store"),
        "--output", str(ws / "stage1.ckpt"), "--epochs", "1", *PRETRAIN_FLAGS,
    ]) == 0
    assert main([
        "pretrain", "--store", str(ws / "selected.store"),
        "--resume", str(ws / "stage1.ckpt"),
        "--output", str(ws / "stage2.ckpt"), "--epochs", "2", *PRETRAIN_FLAGS,
    ]) == 0
    assert (ws / "stage2.ckpt").read_bytes() == (ws / "straight.ckpt").read_bytes()


def test_gradcheck_command(capsys):
    code, out, _ = run(["gradcheck", "--seed", "0"], capsys)
    assert code == 0
    assert "passed=True" in out


def test_retrieve_without_matches_reports_diagnostic(workspace, capsys):
    ws = workspace
    prepare_selected_store(ws, capsys)
    (ws / "none.tsv").write_text("甲骨\t1\t1.0\ttask\n", encoding="utf-8")
    code, _, err = run([
        "retrieve", "--index", str(ws / "corpus.idx"),
        "--store", str(ws / "corpus.store"),
        "--keywords", str(ws / "none.tsv"),
        "--budget", "100", "--output", str(ws / "never.store"),
    ], capsys)
    assert code == 1
    assert "error: NoPositiveScoreError" in err
    assert "no positive-score documents" in err


def test_missing_input_file_fails_with_error_line(tmp_path, capsys):
    code, _, err = run([
        "ingest", "--input", str(tmp_path / "absent.jsonl"),
        "--output", str(tmp_path / "out.store"),
    ], capsys)
    assert code == 1
    assert err.splitlines()[-1].startswith("error: ")


def test_duplicate_source_ids_fail(tmp_path, capsys):
    raw = tmp_path / "dup.jsonl"
    rec = {"source_id": "same", "title": "", "body": IN_CHARS * 3}
    raw.write_text(
        json.dumps(rec, ensure_ascii=False) + "\n"
        + json.dumps(rec, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    code, _, err = run([
        "ingest", "--input", str(raw), "--output", str(tmp_path / "out.store"),
    ], capsys)
    assert code == 1
    assert "error: DuplicateSourceIdError" in err


def test_missing_required_option_fails(tmp_path, capsys):
    code, _, err = run(["ingest", "--input", str(tmp_path / "x.jsonl")], capsys)
    assert code == 1
    assert "error: ConfigError" in err
    assert "--output" in err


def test_config_file_supplies_values(workspace, capsys, caplog):
    ws = workspace
    ini = ws / "pipeline.ini"
    ini.write_text(
        "[ingest]\n"
        f"input = {ws / 'raw.jsonl'}\n"
        f"output = {ws / 'via_config.store'}\n"
        "min_tokens = 5\n",
        encoding="utf-8",
    )
    with caplog.at_level(logging.INFO, logger="domainforge"):
        code = main(["--config", str(ini), "ingest"])
    assert code == 0
    assert (ws / "via_config.store").exists()
    assert "config ingest.min_tokens=5" in caplog.text


def test_flags_override_config_file(workspace, capsys, caplog):
    ws = workspace
    ini = ws / "pipeline.ini"
    ini.write_text(
        "[ingest]\n"
        f"input = {ws / 'raw.jsonl'}\n"
        f"output = {ws / 'a.store'}\n"
        "min_tokens = 5\n",
        encoding="utf-8",
    )
    with caplog.at_level(logging.INFO, logger="domainforge"):
        code = main([
            "--config", str(ini), "ingest", "--min-tokens", "7",
            "--output", str(ws / "b.store"),
        ])
    assert code == 0
    assert "config ingest.min_tokens=7" in caplog.text
    assert (ws / "b.store").exists()
    assert not (ws / "a.store").exists()


def test_config_file_unknown_key_rejected(workspace, capsys):
    ws = workspace
    ini = ws / "bad.ini"
    ini.write_text("[ingest]\nmystery = 1\n", encoding="utf-8")
    code, _, err = run(["--config", str(ini), "ingest"], capsys)
    assert code == 1
    assert "error: ConfigError" in err
    assert "mystery" in err


def test_config_file_unknown_section_rejected(workspace, capsys):
    ws = workspace
    ini = ws / "bad.ini"
    ini.write_text("[mystery]\nx = 1\n", encoding="utf-8")
    code, _, err = run(["--config", str(ini), "ingest"], capsys)
    assert code == 1
    assert "error: ConfigError" in err


def test_config_file_bad_type_rejected(workspace, capsys):
    ws = workspace
    ini = ws / "bad.ini"
    ini.write_text(
        "[ingest]\n"
        f"input = {ws / 'raw.jsonl'}\n"
        f"output = {ws / 'out.store'}\n"
        "min_tokens = lots\n",
        encoding="utf-8",
    )
    code, _, err = run(["--config", str(ini), "ingest"], capsys)
    assert code == 1
    assert "error: ConfigError" in err


def test_eval_rejects_unknown_responder(workspace, capsys):
    ws = workspace
    exam = ws / "exam.jsonl"
    write_exam(exam)
    code, _, err = run([
        "eval", "--checkpoint", str(ws / "missing.ckpt"), "--exam", str(exam),
        "--responder", "oracle",
    ], capsys)
    assert code == 1
    assert "error:" in err


def test_version_lists_artifact_formats(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for tag in ("DFSTORE1", "DFIDX1", "DFCKPT1", "DFVOCAB1"):
        assert tag in out
