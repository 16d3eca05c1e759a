import json

import numpy as np
import pytest

from hierpara import corpus as C
from hierpara import model as M
from hierpara import transfer as X

TINY = dict(feat_dim=8, pool_dim=6, hidden=5, embed=6)


def checkpoint(tmp_path, kind=M.HIERARCHICAL):
    vocab = C.Vocabulary(["a", "b", "c"] + [f"w{i}" for i in range(5)])
    cfg = M.ModelConfig(**TINY, vocab=len(vocab))
    params = M.init_params(cfg, seed=3, kind=kind)
    path = X.save_checkpoint(tmp_path / "m.json", params, cfg, vocab, kind, {"note": 1})
    return path, params, cfg, vocab


def test_checkpoint_roundtrip_is_exact(tmp_path):
    path, params, cfg, vocab = checkpoint(tmp_path)
    ck = X.load_checkpoint(path, kind=M.HIERARCHICAL)
    assert ck.config == cfg and ck.vocab == vocab and ck.metadata == {"note": 1}
    assert all(np.array_equal(ck.params[n], params[n]) for n in params)


def test_payload_layout(tmp_path):
    path, params, _, _ = checkpoint(tmp_path)
    raw = path.with_suffix(".bin").read_bytes()
    assert raw[:4] == b"PCKP" and int.from_bytes(raw[4:8], "little") == 1
    manifest = json.loads(path.read_text())
    first = manifest["params"][0]
    n = int(np.prod(first["shape"]))
    got = np.frombuffer(raw, "<f8", count=n, offset=first["offset"])
    assert np.array_equal(got, params[first["name"]].reshape(-1))
    assert manifest["payload_bytes"] == len(raw)


def test_checkpoint_errors(tmp_path):
    path, *_ = checkpoint(tmp_path)
    with pytest.raises(X.ModelKindError):
        X.load_checkpoint(path, kind=M.FLAT)
    with pytest.raises(X.CheckpointError):
        X.load_checkpoint(tmp_path / "missing.json")
    payload = path.with_suffix(".bin")
    payload.write_bytes(payload.read_bytes()[:-8])
    with pytest.raises(X.CheckpointError, match="bytes"):
        X.load_checkpoint(path)
    payload.write_bytes(b"XXXX" + payload.read_bytes()[4:])
    with pytest.raises(X.CheckpointError):
        X.load_checkpoint(path)
    m = json.loads(path.read_text())
    m["format_version"] = 9
    path.write_text(json.dumps(m))
    with pytest.raises(X.CheckpointError, match="version"):
        X.load_checkpoint(path)


def source_lm(vocab_tokens, seed=0):
    vocab = C.Vocabulary(vocab_tokens)
    cfg = M.ModelConfig(**TINY, vocab=len(vocab))
    return X.Checkpoint(M.init_params(cfg, seed=seed, kind=M.CAPTION_LM), cfg, vocab, M.CAPTION_LM)


def test_transfer_copies_shared_rows_and_falls_back_to_unk():
    src = source_lm(["dog", "car", "red"])
    tvocab = M.flat_vocab(C.Vocabulary(["car", "tree", "dog"]))
    cfg = M.ModelConfig(**TINY, vocab=len(tvocab))
    target = M.init_params(cfg, seed=9, kind=M.FLAT)
    out = X.transfer_init(target, cfg, src, tvocab)
    sp = src.params
    for tok in ("car", "dog", "<start>", "<end>"):
        t, s = tvocab.encode(tok), src.vocab.encode(tok)
        assert np.array_equal(out["embed"][t], sp["embed"][s])
        assert np.array_equal(out["out.W"][t], sp["out.W"][s])
        assert out["out.b"][t] == sp["out.b"][s]
    for tok in ("tree", M.EOP):
        assert np.array_equal(out["embed"][tvocab.encode(tok)], sp["embed"][C.UNK_ID])
    for n in ("word0.W", "word0.b", "word1.W", "word1.b", "topic_proj.W"):
        assert np.array_equal(out[n], sp[n])
    assert np.array_equal(out["pool.W"], target["pool.W"])
    assert not np.array_equal(target["embed"], out["embed"])  # target untouched copy semantics
    assert target is not out


def test_transfer_rejects_mismatched_hidden():
    src = source_lm(["dog"])
    cfg = M.ModelConfig(**{**TINY, "hidden": 7}, vocab=6)
    with pytest.raises(X.TransferError, match="H="):
        X.transfer_init(M.init_params(cfg, kind=M.FLAT), cfg, src, C.Vocabulary(["dog", "x"]))


def test_vocab_mapping():
    m = X.vocab_mapping(C.Vocabulary(["x", "y"]), C.Vocabulary(["y"]))
    assert m == {0: 0, 1: 1, 2: 2, 3: 3, 4: None, 5: 4}


def test_caption_pretraining_lowers_loss_and_freezes_pool():
    scfg = C.SynthConfig(dim=8)
    caps = C.synth_captions(scfg, 200, seed=0)
    cfg = M.ModelConfig(**TINY, vocab=1)
    log = []
    ck = X.pretrain_caption_lm(caps, cfg, steps=100, lr=3e-3, seed=0, log=log)
    first = np.mean([e["loss"] for e in log[:10]])
    last = np.mean([e["loss"] for e in log[-10:]])
    assert last < first
    fresh = M.init_params(ck.config, seed=0, kind=M.CAPTION_LM)
    assert np.array_equal(ck.params["pool.W"], fresh["pool.W"])
    assert not np.array_equal(ck.params["word0.W"], fresh["word0.W"])
