"""Checkpoint files and word-RNN transfer from a caption language model."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from . import numerics as nx
from .corpus import RESERVED, UNK_ID, Vocabulary

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1
_PAYLOAD_HEADER = struct.Struct("<4sI")


class CheckpointError(ValueError):
    """A checkpoint is malformed, truncated or inconsistent."""


class ModelKindError(CheckpointError):
    """The checkpoint holds a different kind of model than requested."""


class TransferError(ValueError):
    """Source and target word RNNs are incompatible."""


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    config: M.ModelConfig
    vocab: Vocabulary
    kind: str = M.HIERARCHICAL
    metadata: dict = field(default_factory=dict)


def _payload_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], config: M.ModelConfig, vocab: Vocabulary,
                    kind: str = M.HIERARCHICAL, metadata: dict | None = None) -> Path:
    """Write ``path`` (JSON manifest) and a sibling ``.bin`` payload of f64 tensors."""
    path = Path(path)
    if len(vocab) != config.vocab:
        raise CheckpointError(f"vocabulary has {len(vocab)} tokens, config says {config.vocab}")
    M.check_params(params, config, kind)
    index = []
    offset = _PAYLOAD_HEADER.size
    chunks = [_PAYLOAD_HEADER.pack(CKPT_MAGIC, CKPT_VERSION)]
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CKPT_VERSION,
        "kind": kind,
        "config": config.to_dict(),
        "vocab": vocab.to_list(),
        "params": index,
        "payload": _payload_path(path).name,
        "payload_bytes": offset,
        "metadata": metadata or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _payload_path(path).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc.msg})") from None
    if manifest.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('format_version')} != {CKPT_VERSION}")
    if kind is not None and manifest.get("kind") != kind:
        raise ModelKindError(f"{path}: holds a {manifest.get('kind')!r} model, expected {kind!r}")
    cfg = M.ModelConfig.from_dict(manifest["config"])
    vocab = Vocabulary.from_list(manifest["vocab"])
    if len(vocab) != cfg.vocab:
        raise CheckpointError(f"{path}: vocabulary has {len(vocab)} tokens, config says {cfg.vocab}")
    payload_file = path.parent / manifest["payload"]
    if not payload_file.exists():
        raise CheckpointError(f"{path}: payload {payload_file} is missing")
    raw = payload_file.read_bytes()
    if len(raw) < _PAYLOAD_HEADER.size:
        raise CheckpointError(f"{payload_file}: truncated payload")
    magic, version = _PAYLOAD_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"{payload_file}: bad header {magic!r} v{version}")
    if len(raw) != manifest.get("payload_bytes", len(raw)):
        raise CheckpointError(f"{payload_file}: {len(raw)} bytes, manifest says {manifest['payload_bytes']}")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"{payload_file}: truncated while reading {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).copy()
    try:
        M.check_params(params, cfg, manifest["kind"])
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return Checkpoint(params, cfg, vocab, manifest["kind"], manifest.get("metadata", {}))


# ---------------------------------------------------------------------------
# Transfer


def vocab_mapping(target: Vocabulary, source: Vocabulary) -> dict[int, int | None]:
    """Target id -> source id, or None for tokens the source lacks."""
    return {i: (source.stoi[t] if t in source else None) for i, t in enumerate(target.itos)}


def transfer_init(target: Mapping[str, np.ndarray], target_cfg: M.ModelConfig, source: Checkpoint,
                  target_vocab: Vocabulary, mapping: dict[int, int | None] | None = None
                  ) -> "OrderedDict[str, np.ndarray]":
    """Copy the source word RNN into fresh target parameters.

    LSTM weights are copied whole; embedding rows and output-projection rows
    and biases go token by token, with tokens missing from the source taking
    the source UNK row.  The topic projection is copied when shapes agree.
    Everything else keeps its target value.
    """
    src, scfg = source.params, source.config
    if (scfg.hidden, scfg.embed) != (target_cfg.hidden, target_cfg.embed):
        raise TransferError(
            f"word RNN mismatch: source H={scfg.hidden}, E={scfg.embed}; target H={target_cfg.hidden}, E={target_cfg.embed}"
        )
    if mapping is None:
        mapping = vocab_mapping(target_vocab, source.vocab)
    if set(mapping) != set(range(target_cfg.vocab)):
        raise TransferError("vocabulary mapping must cover every target id")
    out = OrderedDict((n, np.array(p, copy=True)) for n, p in target.items())
    for name in ("word0.W", "word0.b", "word1.W", "word1.b"):
        if out[name].shape != src[name].shape:
            raise TransferError(f"{name}: source {src[name].shape} vs target {out[name].shape}")
        out[name][...] = src[name]
    rows = np.array([UNK_ID if mapping[i] is None else mapping[i] for i in range(target_cfg.vocab)])
    out["embed"][...] = src["embed"][rows]
    out["out.W"][...] = src["out.W"][rows]
    out["out.b"][...] = src["out.b"][rows]
    for name in ("topic_proj.W", "topic_proj.b"):
        if out[name].shape == src[name].shape:
            out[name][...] = src[name]
    return out


def caption_vocab(captions: Sequence, min_count: int = 1) -> Vocabulary:
    from .corpus import build_vocab

    return build_vocab([para for _, para in captions], min_count=min_count)


def pretrain_caption_lm(captions: Sequence[tuple[np.ndarray, list[list[str]]]], cfg: M.ModelConfig,
                        vocab: Vocabulary | None = None, steps: int = 500, batch_size: int = 16,
                        lr: float = 1e-3, seed: int = 0, log: list | None = None) -> Checkpoint:
    """Train embedding, two-layer word LSTM, output and topic projections on
    (region, one-sentence caption) pairs.  The region projection that makes
    the topic stays at its seeded initial value."""
    if vocab is None:
        vocab = caption_vocab(captions)
    cfg = M.ModelConfig(**{**cfg.to_dict(), "vocab": len(vocab)})
    params = M.init_params(cfg, seed=seed, kind=M.CAPTION_LM)
    feats = [f for f, _ in captions]
    sents = [vocab.encode_paragraph(p)[0][: cfg.n_max] for _, p in captions]
    state = nx.AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    trainable = set(M.WORD_STACK)
    order = rng.permutation(len(captions))
    pos = 0
    for step in range(steps):
        if pos + batch_size > len(order):
            order, pos = rng.permutation(len(captions)), 0
        idx = order[pos : pos + batch_size]
        pos += batch_size
        trace = M.caption_batch_loss([feats[i] for i in idx], [sents[i] for i in idx], params, cfg)
        if not np.isfinite(trace.value):
            raise nx.NonFiniteError(f"non-finite caption loss at step {step}")
        grads = M.backward(trace, params)
        nx.adam_step(params, OrderedDict((n, g) for n, g in grads.items() if n in trainable), state)
        if log is not None:
            log.append({"step": step, "loss": trace.value})
    return Checkpoint(params, cfg, vocab, M.CAPTION_LM, {"steps": steps, "seed": seed})
