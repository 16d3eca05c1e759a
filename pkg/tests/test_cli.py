import filecmp
import json
import subprocess
import sys

import pytest

from hierpara import corpus as C
from hierpara.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps({"n_train": 16, "n_val": 4, "n_test": 4, "dim": 16}))
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(root / "data")]) == 0
    (root / "run.json").write_text(json.dumps({"model": {"pool_dim": 8, "hidden": 8, "embed": 8},
                                               "max_steps": 8, "batch_size": 4, "val_interval": 4, "min_count": 1}))
    assert main(["train", "--config", str(root / "run.json"), "--data", str(root / "data/manifest.jsonl"),
                 "--out", str(root / "ck")]) == 0
    return root


def test_synth_writes_declared_counts_and_is_reproducible(workspace, tmp_path):
    recs = C.load_dataset(workspace / "data/manifest.jsonl")
    assert [len(C.split_records(recs, s)) for s in C.SPLITS] == [16, 4, 4]
    assert main(["synth", "--config", str(workspace / "synth.json"), "--out", str(tmp_path / "again")]) == 0
    cmp = filecmp.dircmp(workspace / "data", tmp_path / "again")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


def test_synth_bad_config_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"objects": [0, 3]}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) != 0
    assert "objects" in capsys.readouterr().err


def test_train_outputs(workspace):
    assert (workspace / "ck/best.json").exists() and (workspace / "ck/last.bin").exists()
    header = json.loads((workspace / "ck/train_log.jsonl").read_text().splitlines()[0])
    assert header["config"]["run"]["max_steps"] == 8


def test_generate_records_and_top_k_m(workspace, tmp_path):
    data = str(workspace / "data/manifest.jsonl")
    ck = str(workspace / "ck/best.json")
    assert main(["generate", "--checkpoint", ck, "--data", data, "--out", str(tmp_path / "p.jsonl")]) == 0
    rows = [json.loads(x) for x in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(rows) == 4 and {"id", "paragraph", "sentences", "token_ids"} <= set(rows[0])
    # a single feature file, once with the default pooling and once with k = M
    rec = C.split_records(C.load_dataset(data), "test")[0]
    fpath = str(workspace / "data" / rec.feature_path)
    m = rec.features.shape[0]
    main(["generate", "--checkpoint", ck, "--features", fpath, "--out", str(tmp_path / "a.jsonl")])
    main(["generate", "--checkpoint", ck, "--features", fpath, "--top-k", str(m), "--out", str(tmp_path / "b.jsonl")])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_generate_missing_checkpoint_fails(tmp_path):
    assert main(["generate", "--checkpoint", str(tmp_path / "none.json"), "--features", "x"]) != 0


def test_evaluate_references_against_themselves(workspace, tmp_path, capsys):
    recs = C.split_records(C.load_dataset(workspace / "data/manifest.jsonl"), "test")
    preds = tmp_path / "p.jsonl"
    preds.write_text("".join(json.dumps({"id": r.id, "paragraph": r.text, "sentences": r.paragraph}) + "\n"
                             for r in recs))
    capsys.readouterr()
    assert main(["evaluate", "--predictions", str(preds), "--data", str(workspace / "data/manifest.jsonl")]) == 0
    out = capsys.readouterr().out
    report = json.loads(out[: out.index("\n}") + 2])
    assert all(report[f"bleu{n}"] == pytest.approx(100.0) for n in range(1, 5))
    assert "stats" in report and "reference_stats" in report


def test_evaluate_empty_predictions_lists_missing_ids(workspace, tmp_path, capsys):
    preds = tmp_path / "empty.jsonl"
    preds.write_text("")
    assert main(["evaluate", "--predictions", str(preds), "--data", str(workspace / "data/manifest.jsonl")]) != 0
    err = capsys.readouterr().err
    assert "4 reference id(s)" in err and "test-00000" in err


def test_stats_matches_templates(workspace, capsys):
    capsys.readouterr()
    assert main(["stats", "--data", str(workspace / "data/manifest.jsonl")]) == 0
    got = json.loads(capsys.readouterr().out)
    recs = C.load_dataset(workspace / "data/manifest.jsonl")
    # every synthetic sentence is one template with the name filled in
    lens = {len(C.tokenize(t.format(name="x"))[0]) for t in C.DEFAULT_TEMPLATES}
    assert all(len(s) in lens for r in recs for s in r.paragraph)
    total = sum(len(s) for r in recs for s in r.paragraph)
    assert got["description_length"] == pytest.approx(total / len(recs))
    assert got["paragraphs"] == 24


def test_grad_check_report_and_corrupt_hook(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "pool.W" in out and "word1.W" in out and "PASS" in out
    assert main(["grad-check", "--float64-only", "--corrupt"]) != 0


def test_pretrain_and_transfer_init(workspace, tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"dim": 16}))
    (tmp_path / "m.json").write_text(json.dumps({"pool_dim": 8, "hidden": 8, "embed": 8}))
    lm = str(tmp_path / "lm.json")
    assert main(["pretrain", "--synth-config", str(tmp_path / "s.json"), "--model-config", str(tmp_path / "m.json"),
                 "--captions", "50", "--steps", "5", "--out", lm]) == 0
    capsys.readouterr()
    assert main(["transfer-init", "--config", str(workspace / "run.json"), "--model", "flat", "--source", lm,
                 "--data", str(workspace / "data/manifest.jsonl"), "--out", str(tmp_path / "init.json")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["shared_tokens"] > 4 and info["unk_initialized"] >= 1  # <eop> at least
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"pool_dim": 8, "hidden": 9, "embed": 8}, "min_count": 1}))
    assert main(["transfer-init", "--config", str(bad), "--source", lm,
                 "--data", str(workspace / "data/manifest.jsonl"), "--out", str(tmp_path / "x.json")]) != 0
    assert main(["train", "--config", str(workspace / "run.json"), "--model", "flat", "--max-steps", "2",
                 "--data", str(workspace / "data/manifest.jsonl"), "--init-from", str(tmp_path / "init.json"),
                 "--out", str(tmp_path / "ft")]) == 0


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hierpara", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "grad-check" in out.stdout
