"""Command-line entry point: ``hierpara <command> ...``.

Commands: synth, train, generate, evaluate, stats, grad-check, pretrain,
transfer-init.  Every command exits 0 on success, 1 on a reported error
(bad input, failed check) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import corpus as C
from . import metrics
from . import model as M
from . import numerics as nx
from . import reference
from . import training as T
from . import transfer as X

log = logging.getLogger("hierpara")


class CommandError(Exception):
    """Reported to the user as a one-line message with exit status 1."""


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CommandError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc.msg})") from None


def _load_records(manifest: str) -> list[C.DatasetRecord]:
    try:
        return C.load_dataset(manifest)
    except C.DatasetError as exc:
        raise CommandError(str(exc)) from None


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = C.SynthConfig.from_dict(raw)
        records = C.synth_generate(cfg, s_max=args.s_max)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out)
    C.write_dataset(out, records)
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    counts = {s: len(C.split_records(records, s)) for s in C.SPLITS}
    print(json.dumps({"out": str(out), "records": counts}))
    return 0


def cmd_train(args) -> int:
    raw = _read_json(args.config)
    for key, val in (("seed", args.seed), ("kind", args.model), ("precision", args.precision),
                     ("max_steps", args.max_steps)):
        if val is not None:
            raw[key] = val
    try:
        run = T.RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CommandError(str(exc)) from None
    records = _load_records(args.data)
    train_recs = C.split_records(records, "train")
    val_recs = C.split_records(records, "val")
    init = None
    if args.init_from:
        init = X.load_checkpoint(args.init_from, kind=run.kind).params
    try:
        result = T.train(run, train_recs, val_recs, out_dir=args.out, params=init)
    except nx.NonFiniteError as exc:
        raise CommandError(f"training diverged: {exc}") from None
    print(json.dumps({"best_step": result.best_step, "best_score": result.best_score, "out": args.out}))
    return 0


def _generate(ckpt: X.Checkpoint, records, top_k):
    paras = T.generate_paragraphs(records, ckpt.params, ckpt.config, ckpt.kind, top_k=top_k)
    for rec, ids in zip(records, paras):
        sents = ckpt.vocab.decode_paragraph(ids)
        yield {"id": rec.id, "paragraph": C.detokenize(sents), "sentences": sents, "token_ids": ids}


def cmd_generate(args) -> int:
    try:
        ckpt = X.load_checkpoint(args.checkpoint)
    except X.CheckpointError as exc:
        raise CommandError(str(exc)) from None
    if ckpt.kind == M.CAPTION_LM:
        raise CommandError("caption language models cannot generate paragraphs")
    if args.features:
        try:
            feats = C.read_features(args.features)
        except (OSError, C.DatasetError) as exc:
            raise CommandError(str(exc)) from None
        records = [C.DatasetRecord(Path(args.features).stem, "test", feats, "", [])]
    elif args.data:
        records = C.split_records(_load_records(args.data), args.split)
    else:
        raise CommandError("give --features or --data")
    if args.top_k is not None and args.top_k < 1:
        raise CommandError("--top-k must be >= 1")
    if args.precision == "f32":
        ckpt.params = OrderedDict((n, p.astype(np.float32)) for n, p in ckpt.params.items())
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for row in _generate(ckpt, records, args.top_k):
            out.write(json.dumps(row) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def read_predictions(path: str) -> dict[str, list[list[str]]]:
    preds = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CommandError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            sents = obj.get("sentences")
            if sents is None:
                sents = C.tokenize(obj["paragraph"]) if obj.get("paragraph") else []
            preds[obj["id"]] = sents
    return preds


def cmd_evaluate(args) -> int:
    try:
        preds = read_predictions(args.predictions)
    except FileNotFoundError:
        raise CommandError(f"predictions file {args.predictions} not found") from None
    refs = C.split_records(_load_records(args.data), args.split)
    missing = [r.id for r in refs if r.id not in preds]
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise CommandError(f"{len(missing)} reference id(s) have no prediction: {shown}")
    report = metrics.score_paragraphs([preds[r.id] for r in refs], [r.paragraph for r in refs])
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    print(report.to_json())
    print(report.format_table(args.name))
    return 0


def cmd_stats(args) -> int:
    records = _load_records(args.data)
    if args.split != "all":
        records = C.split_records(records, args.split)
    if not records:
        raise CommandError("no records in the selected split")
    st = metrics.corpus_stats([r.paragraph for r in records])
    print(json.dumps({
        "paragraphs": st.n_paragraphs,
        "description_length": st.avg_length,
        "description_length_std": st.length_std,
        "sentence_length": st.avg_sentence_length,
        "sentences_per_paragraph": st.avg_sentences,
        "diversity": st.diversity,
        "vocab_size": st.vocab_size,
    }, indent=1))
    return 0


TINY = dict(feat_dim=8, pool_dim=6, hidden=5, embed=6, vocab=12)


def tiny_instance(seed: int = 0, regions: int = 3):
    """The gradient-check instance: M=3 regions, sentences of 3 and 2 tokens."""
    cfg = M.ModelConfig(**TINY)
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(regions, cfg.feat_dim))
    para = [[4, 5, 6], [7, 8]]
    params = M.init_params(cfg, seed=seed + 1)
    return cfg, feats, para, params


def run_grad_check(cfg, features, paragraphs, params, kind=M.HIERARCHICAL, eps=1e-6, corrupt=False,
                   max_coords=None, precise=True):
    def loss_fn(p):
        trace, grads = M.loss_and_grads(p, features, paragraphs, cfg, kind)
        if corrupt:
            grads = OrderedDict(grads)
            first = next(iter(grads))
            grads[first] = grads[first] + 1e-3
        return trace.value, grads

    numeric = None
    if precise:
        ref = reference.hierarchical_loss if kind == M.HIERARCHICAL else reference.flat_loss
        numeric = lambda p: ref(p, features, paragraphs, cfg)  # noqa: E731
    return nx.grad_check(loss_fn, params, eps, max_coords=max_coords,
                         skip=M.pool_tie_skip(params, features, eps), numeric_fn=numeric)


def cmd_grad_check(args) -> int:
    raw = _read_json(args.config)
    seed = raw.pop("seed", args.seed)
    tol = raw.pop("tolerance", args.tolerance)
    cfg, feats, para, params = tiny_instance(seed)
    if raw:
        try:
            cfg = M.ModelConfig(**{**TINY, **raw})
        except (TypeError, ValueError) as exc:
            raise CommandError(str(exc)) from None
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(3, cfg.feat_dim))
        para = [[min(t, cfg.vocab - 1) for t in s] for s in para]
        params = M.init_params(cfg, seed=seed + 1)
    kind = args.model
    if kind == M.FLAT:
        cfg = M.ModelConfig(**{**cfg.to_dict(), "vocab": cfg.vocab + 1})
        params = M.init_params(cfg, seed=seed + 1, kind=M.FLAT)
    report = run_grad_check(cfg, [feats], [para], params, kind, args.eps, corrupt=args.corrupt,
                            precise=not args.float64_only)
    print(report.format())
    ok = report.max_rel_error < tol
    print(f"{'PASS' if ok else 'FAIL'}: max rel. error {report.max_rel_error:.3e} (tolerance {tol:g})")
    return 0 if ok else 1


def cmd_pretrain(args) -> int:
    raw = _read_json(args.synth_config)
    try:
        scfg = C.SynthConfig.from_dict(raw)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    captions = C.synth_captions(scfg, args.captions, seed=args.seed)
    model_raw = _read_json(args.model_config)
    model_raw.setdefault("feat_dim", scfg.dim)
    model_raw["vocab"] = 1
    cfg = M.ModelConfig(**model_raw)
    vocab = None
    if args.vocab_from:
        vocab = C.build_vocab([r.paragraph for r in C.split_records(_load_records(args.vocab_from), "train")], 1)
        vocab = vocab.with_tokens(t for _, p in captions for s in p for t in s if t not in vocab)
    ckpt = X.pretrain_caption_lm(captions, cfg, vocab=vocab, steps=args.steps, seed=args.seed, lr=args.lr)
    X.save_checkpoint(args.out, ckpt.params, ckpt.config, ckpt.vocab, ckpt.kind, ckpt.metadata)
    print(json.dumps({"out": args.out, "vocab": len(ckpt.vocab)}))
    return 0


def cmd_transfer_init(args) -> int:
    try:
        source = X.load_checkpoint(args.source)
    except X.CheckpointError as exc:
        raise CommandError(str(exc)) from None
    raw = _read_json(args.config)
    if args.model is not None:
        raw["kind"] = args.model
    run = T.RunConfig.from_dict(raw)
    records = C.split_records(_load_records(args.data), "train")
    vocab = C.build_vocab([r.paragraph for r in records], min_count=run.min_count)
    cfg, vocab = T.model_setup(run, vocab, records[0].features.shape[1])
    target = M.init_params(cfg, seed=run.seed, kind=run.kind)
    try:
        params = X.transfer_init(target, cfg, source, vocab)
    except X.TransferError as exc:
        raise CommandError(str(exc)) from None
    mapping = X.vocab_mapping(vocab, source.vocab)
    shared = sum(v is not None for v in mapping.values())
    X.save_checkpoint(args.out, params, cfg, vocab, run.kind, {"transferred_from": str(args.source)})
    print(json.dumps({"out": args.out, "shared_tokens": shared, "unk_initialized": len(mapping) - shared}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierpara", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--s-max", type=int, default=6)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=[M.HIERARCHICAL, M.FLAT])
    p.add_argument("--precision", choices=["f64", "f32"])
    p.add_argument("--max-steps", type=int)
    p.add_argument("--init-from", help="checkpoint to start from (e.g. from transfer-init)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="greedy paragraphs as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset manifest")
    p.add_argument("--split", default="test", choices=C.SPLITS)
    p.add_argument("--features", help="a single feature file")
    p.add_argument("--top-k", type=int)
    p.add_argument("--precision", choices=["f64", "f32"], default="f64")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="BLEU/CIDEr and statistics of predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=C.SPLITS)
    p.add_argument("--json", help="also write the report here")
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="paragraph statistics of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all", choices=("all",) + C.SPLITS)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("grad-check", help="finite-difference check of the training loss")
    p.add_argument("--config", help="ModelConfig overrides JSON (plus optional seed, tolerance)")
    p.add_argument("--model", choices=[M.HIERARCHICAL, M.FLAT], default=M.HIERARCHICAL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--float64-only", action="store_true",
                   help="difference the float64 loss instead of the 40-digit reference")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("pretrain", help="train a caption language model on synthetic captions")
    p.add_argument("--synth-config", help="SynthConfig JSON")
    p.add_argument("--model-config", help="ModelConfig overrides JSON")
    p.add_argument("--captions", type=int, default=2000)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-from", help="dataset manifest whose vocabulary to include")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer-init", help="initialize a model's word RNN from a caption LM")
    p.add_argument("--config", help="RunConfig JSON for the target")
    p.add_argument("--model", choices=[M.HIERARCHICAL, M.FLAT])
    p.add_argument("--source", required=True, help="caption LM checkpoint")
    p.add_argument("--data", required=True, help="target dataset manifest (vocabulary)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer_init)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
