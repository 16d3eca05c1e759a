"""Training loop, validation scoring and checkpoint selection."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from . import model as M
from . import numerics as nx
from .corpus import DatasetRecord, Vocabulary, build_vocab
from .transfer import save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)  # ModelConfig overrides; vocab is filled in from data
    kind: str = M.HIERARCHICAL
    seed: int = 0
    max_steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_interval: int = 200
    patience: int = 20
    log_interval: int = 10
    val_limit: int | None = None  # score at most this many validation images
    min_count: int = 2
    init: str = "uniform"  # or "zero"
    precision: str = "f64"
    match_budget: bool = False  # flat only: widen H to the hierarchical parameter count
    selection: str = "cider+100*bleu4"

    def __post_init__(self):
        if self.kind not in (M.HIERARCHICAL, M.FLAT):
            raise ValueError(f"RunConfig.kind must be hierarchical or flat, got {self.kind!r}")
        if self.precision not in ("f64", "f32"):
            raise ValueError("RunConfig.precision must be f64 or f32")
        if self.init not in ("uniform", "zero"):
            raise ValueError("RunConfig.init must be uniform or zero")
        for name in ("max_steps", "batch_size", "val_interval", "log_interval", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"RunConfig.{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"RunConfig: unknown field(s) {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def model_setup(run: RunConfig, vocab: Vocabulary, feat_dim: int) -> tuple[M.ModelConfig, Vocabulary]:
    """Model config and (for flat models, paragraph-end-extended) vocabulary."""
    overrides = dict(run.model)
    overrides.setdefault("feat_dim", feat_dim)
    if run.kind == M.FLAT:
        vocab = M.flat_vocab(vocab)
    cfg = M.ModelConfig(**{**overrides, "vocab": len(vocab)})
    if run.kind == M.FLAT and run.match_budget:
        base = M.ModelConfig(**{**overrides, "vocab": len(vocab) - 1})
        cfg = M.matched_flat_config(base)
    return cfg, vocab


def encode_records(records: Sequence[DatasetRecord], vocab: Vocabulary, cfg: M.ModelConfig):
    feats = [r.features for r in records]
    paras = [M.truncate_paragraph(vocab.encode_paragraph(r.paragraph), cfg) for r in records]
    return feats, paras


def generate_paragraphs(records: Sequence[DatasetRecord], params, cfg: M.ModelConfig, kind: str,
                        top_k: int | None = None) -> list[list[list[int]]]:
    """Greedy paragraphs, one image at a time (the same sampler everywhere)."""
    gen = M.generate if kind == M.HIERARCHICAL else M.flat_generate
    out = []
    for r in records:
        k = None if top_k is None else min(top_k, r.features.shape[0])
        out.append(gen(r.features, params, cfg, k=k))
    return out


def decode(paragraphs, vocab: Vocabulary) -> list[list[list[str]]]:
    return [vocab.decode_paragraph(p) for p in paragraphs]


def evaluate_records(records: Sequence[DatasetRecord], params, cfg: M.ModelConfig, kind: str,
                     vocab: Vocabulary, with_stats: bool = False) -> metrics.ScoreReport:
    preds = decode(generate_paragraphs(records, params, cfg, kind), vocab)
    return metrics.score_paragraphs(preds, [r.paragraph for r in records], with_stats=with_stats)


@dataclass
class TrainResult:
    params: "OrderedDict[str, np.ndarray]"
    best_params: "OrderedDict[str, np.ndarray]"
    config: M.ModelConfig
    vocab: Vocabulary
    log: list[dict]
    best_score: float | None
    best_step: int | None


def _write_log(fh, entry: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(entry, sort_keys=False) + "\n")
        fh.flush()


def train(run: RunConfig, train_records: Sequence[DatasetRecord], val_records: Sequence[DatasetRecord] = (),
          out_dir: str | Path | None = None, vocab: Vocabulary | None = None, params=None,
          trainable: set[str] | None = None) -> TrainResult:
    """Adam on minibatch-mean losses with periodic validation.

    With ``out_dir`` set, writes ``train_log.jsonl`` (a config header line,
    then one line per logged step), ``best.json``/``best.bin`` for the
    highest validation CIDEr + 100*BLEU-4, and ``last.json``/``last.bin``.
    """
    if not train_records:
        raise ValueError("no training records")
    if vocab is None:
        vocab = build_vocab([r.paragraph for r in train_records], min_count=run.min_count)
    cfg, vocab = model_setup(run, vocab, train_records[0].features.shape[1])
    if params is None:
        params = M.init_params(cfg, seed=run.seed, kind=run.kind, zero=run.init == "zero", dtype=run.dtype)
    else:
        params = OrderedDict((n, np.array(p, dtype=run.dtype, copy=True)) for n, p in params.items())
    M.check_params(params, cfg, run.kind)
    feats, paras = encode_records(train_records, vocab, cfg)
    feats = [f.astype(run.dtype) for f in feats]
    val_records = list(val_records)[: run.val_limit] if run.val_limit else list(val_records)

    loss_fn = M.batch_loss if run.kind == M.HIERARCHICAL else M.flat_batch_loss
    state = nx.AdamState(lr=run.lr, beta1=run.beta1, beta2=run.beta2, eps=run.adam_eps)
    rng = np.random.default_rng(run.seed)

    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.jsonl", "w", encoding="utf-8")
    history: list[dict] = []
    header = {"config": {"run": run.to_dict(), "model": cfg.to_dict(), "vocab_size": len(vocab),
                         "n_train": len(train_records), "n_val": len(val_records)}}
    _write_log(fh, header)

    best_score = best_step = None
    best_params = OrderedDict((n, p.copy()) for n, p in params.items())
    stale = 0
    order = rng.permutation(len(feats))
    pos = 0
    try:
        for step in range(run.max_steps):
            if pos + run.batch_size > len(order):
                order, pos = rng.permutation(len(feats)), 0
            idx = order[pos : pos + run.batch_size]
            pos += run.batch_size
            trace = loss_fn([feats[i] for i in idx], [paras[i] for i in idx], params, cfg)
            if not np.isfinite(trace.value):
                raise nx.NonFiniteError(
                    f"non-finite loss at step {step} (sentence {trace.loss_sent}, word {trace.loss_word})")
            grads = M.backward(trace, params)
            if trainable is not None:
                grads = OrderedDict((n, g) for n, g in grads.items() if n in trainable)
            nx.adam_step(params, grads, state)

            entry = None
            if step % run.log_interval == 0 or step == run.max_steps - 1:
                entry = {"step": step, "loss": trace.value, "loss_sent": trace.loss_sent,
                         "loss_word": trace.loss_word}
            done = step + 1
            if val_records and (done % run.val_interval == 0 or done == run.max_steps):
                report = evaluate_records(val_records, params, cfg, run.kind, vocab)
                entry = entry or {"step": step, "loss": trace.value, "loss_sent": trace.loss_sent,
                                  "loss_word": trace.loss_word}
                entry["val_cider"] = report.cider
                entry["val_bleu4"] = report.bleu[3]
                score = report.selection_score
                if best_score is None or score > best_score:
                    best_score, best_step, stale = score, step, 0
                    best_params = OrderedDict((n, p.copy()) for n, p in params.items())
                    if out is not None:
                        save_checkpoint(out / "best.json", best_params, cfg, vocab, run.kind,
                                        {"step": step, "score": score, "seed": run.seed})
                else:
                    stale += 1
            if entry is not None:
                history.append(entry)
                _write_log(fh, entry)
            if stale >= run.patience:
                log.info("stopping at step %d: no validation improvement in %d checks", step, stale)
                break
    finally:
        if fh is not None:
            fh.close()
    if not val_records:
        best_params = OrderedDict((n, p.copy()) for n, p in params.items())
    if out is not None:
        save_checkpoint(out / "last.json", params, cfg, vocab, run.kind, {"step": step, "seed": run.seed})
        if not val_records:
            save_checkpoint(out / "best.json", best_params, cfg, vocab, run.kind, {"step": step, "seed": run.seed})
    return TrainResult(params, best_params, cfg, vocab, history, best_score, best_step)
