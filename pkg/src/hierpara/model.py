"""Hierarchical paragraph decoder over max-pooled region features.

Parameter names (shared by the flat baseline and the caption language model
so that word-level weights can be transferred between them):

========================  ==================================================
``pool.W``, ``pool.b``    region projection, P x D and P
``sent.W``, ``sent.b``    sentence LSTM, input P, hidden H
``stop.W``, ``stop.b``    halting logit, 1 x H and 1
``topic1.*``/``topic2.*`` topic MLP, H -> H (relu) -> P
``topic_proj.*``          topic (or pooled vector) into word-embedding space
``embed``                 V x E word embeddings
``word0.*``/``word1.*``   two-layer word LSTM
``out.W``, ``out.b``      V x H output projection
========================  ==================================================
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import END_ID, PAD_ID, START_ID, Vocabulary

log = logging.getLogger(__name__)

HIERARCHICAL = "hierarchical"
FLAT = "flat"
CAPTION_LM = "caption_lm"
MODEL_KINDS = (HIERARCHICAL, FLAT, CAPTION_LM)

EOP = "<eop>"

WORD_STACK = ("topic_proj.W", "topic_proj.b", "embed", "word0.W", "word0.b", "word1.W", "word1.b", "out.W", "out.b")


@dataclass
class ModelConfig:
    feat_dim: int = 64
    pool_dim: int = 32
    hidden: int = 32
    embed: int = 32
    vocab: int = 16
    s_max: int = 6
    n_max: int = 20
    t_stop: float = 0.5
    lambda_sent: float = 5.0
    lambda_word: float = 1.0

    def __post_init__(self):
        for name in ("feat_dim", "pool_dim", "hidden", "embed", "vocab", "s_max", "n_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if not 0.0 < self.t_stop < 1.0:
            raise ValueError("ModelConfig.t_stop must lie in (0, 1)")
        if self.lambda_sent < 0 or self.lambda_word < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"ModelConfig: unknown field(s) {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, vocab: int, **kw) -> "ModelConfig":
        return cls(vocab=vocab, **kw)

    @classmethod
    def paper(cls, vocab: int, **kw) -> "ModelConfig":
        """Full-size constants: 4096-d regions, P=1024, H=E=512, N_MAX=50."""
        base = dict(feat_dim=4096, pool_dim=1024, hidden=512, embed=512, s_max=6, n_max=50)
        base.update(kw)
        return cls(vocab=vocab, **base)


# ---------------------------------------------------------------------------
# Parameters


def param_shapes(cfg: ModelConfig, kind: str = HIERARCHICAL) -> "OrderedDict[str, tuple[int, ...]]":
    D, P, H, E, V = cfg.feat_dim, cfg.pool_dim, cfg.hidden, cfg.embed, cfg.vocab
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["pool.W"] = (P, D)
    shapes["pool.b"] = (P,)
    if kind == HIERARCHICAL:
        shapes["sent.W"] = (4 * H, P + H)
        shapes["sent.b"] = (4 * H,)
        shapes["stop.W"] = (1, H)
        shapes["stop.b"] = (1,)
        shapes["topic1.W"] = (H, H)
        shapes["topic1.b"] = (H,)
        shapes["topic2.W"] = (P, H)
        shapes["topic2.b"] = (P,)
    elif kind not in (FLAT, CAPTION_LM):
        raise ValueError(f"unknown model kind {kind!r}")
    shapes["topic_proj.W"] = (E, P)
    shapes["topic_proj.b"] = (E,)
    shapes["embed"] = (V, E)
    shapes["word0.W"] = (4 * H, E + H)
    shapes["word0.b"] = (4 * H,)
    shapes["word1.W"] = (4 * H, 2 * H)
    shapes["word1.b"] = (4 * H,)
    shapes["out.W"] = (V, H)
    shapes["out.b"] = (V,)
    return shapes


def count_params(cfg: ModelConfig, kind: str = HIERARCHICAL) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg, kind).values())


def matched_flat_config(cfg: ModelConfig) -> ModelConfig:
    """Flat-model config whose hidden size gives the closest parameter count."""
    target = count_params(cfg, HIERARCHICAL)
    best = min(range(1, 4 * cfg.hidden + 1),
               key=lambda h: abs(count_params(replace(cfg, hidden=h, vocab=cfg.vocab + 1), FLAT) - target))
    return replace(cfg, hidden=best, vocab=cfg.vocab + 1)


def init_params(cfg: ModelConfig, seed: int = 0, kind: str = HIERARCHICAL, zero: bool = False,
                dtype=nx.DEFAULT_DTYPE) -> "OrderedDict[str, np.ndarray]":
    """Seeded uniform(+-1/sqrt(fan_in)) weights; ``zero=True`` gives all zeros."""
    shapes = param_shapes(cfg, kind)
    if zero:
        return nx.new_paramset((n, np.zeros(s, dtype=dtype)) for n, s in shapes.items())
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in shapes.items():
        if name.endswith(".b"):
            continue
        if name in ("sent.W", "word0.W", "word1.W"):
            hidden = shape[0] // 4
            params[name], params[name[:-1] + "b"] = nx.lstm_params(rng, shape[1] - hidden, hidden, dtype)
        elif name == "topic_proj.W" and cfg.embed == cfg.pool_dim:
            params[name] = np.eye(cfg.embed, dtype=dtype)
        else:
            params[name] = nx.uniform_init(rng, shape, shape[1], dtype)
        bias = name[:-1] + "b"
        if bias in shapes and bias not in params:
            params[bias] = np.zeros(shapes[bias], dtype=dtype)
    return nx.new_paramset((n, params[n]) for n in shapes)


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig, kind: str) -> None:
    shapes = param_shapes(cfg, kind)
    if list(params) != list(shapes):
        raise ValueError(f"parameter names do not match a {kind} model: {list(params)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")


def _wrap(params: Mapping[str, np.ndarray], grad: bool) -> dict[str, nx.Tensor]:
    return {n: nx.Tensor(p, requires_grad=grad, name=n) for n, p in params.items()}


# ---------------------------------------------------------------------------
# Building blocks


def truncate_paragraph(paragraph: Sequence[Sequence[int]], cfg: ModelConfig) -> list[list[int]]:
    """Clip to S_MAX sentences of at most N_MAX tokens, warning when clipped."""
    if not paragraph or any(len(s) == 0 for s in paragraph):
        raise ValueError("paragraph must have at least one nonempty sentence")
    out = [list(s[: cfg.n_max]) for s in paragraph[: cfg.s_max]]
    if len(paragraph) > cfg.s_max or any(len(s) > cfg.n_max for s in paragraph):
        log.warning("paragraph truncated to %d sentences of at most %d tokens", cfg.s_max, cfg.n_max)
    return out


def pool_regions(features: np.ndarray, params: Mapping, k: int | None = None) -> nx.Tensor:
    """Elementwise max of projected regions; ``k`` keeps only the first k rows."""
    feats = np.asarray(features)
    if k is not None:
        if not 1 <= k <= feats.shape[0]:
            raise ValueError(f"top-k must lie in [1, {feats.shape[0]}], got {k}")
        feats = feats[:k]
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("pool_regions needs a nonempty M x D feature set")
    p = _as_tensors(params)
    return nx.max_pool_set(nx.linear(nx.Tensor(feats), p["pool.W"], p["pool.b"]))


def _as_tensors(params: Mapping) -> Mapping[str, nx.Tensor]:
    first = next(iter(params.values()))
    return params if isinstance(first, nx.Tensor) else _wrap(params, False)


def _pool_batch(features: Sequence[np.ndarray], p: Mapping[str, nx.Tensor]) -> nx.Tensor:
    for f in features:
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError("every image needs a nonempty M x D feature set")
    offsets = np.cumsum([0] + [f.shape[0] for f in features])
    stacked = nx.Tensor(np.concatenate(features, axis=0).astype(p["pool.W"].data.dtype, copy=False))
    return nx.segment_max(nx.linear(stacked, p["pool.W"], p["pool.b"]), offsets)


def _sentence_step(v, h, c, p):
    h, c = nx.lstm_cell(v, h, c, p["sent.W"], p["sent.b"])
    stop_logit = nx.linear(h, p["stop.W"], p["stop.b"])
    topic = nx.linear(nx.relu(nx.linear(h, p["topic1.W"], p["topic1.b"])), p["topic2.W"], p["topic2.b"])
    return h, c, stop_logit, topic


def sentence_rnn_forward(v_p, n_sent: int, params: Mapping, cfg: ModelConfig):
    """Unroll the sentence LSTM ``n_sent`` steps on a constant pooled input.

    ``v_p`` is a length-P vector or a (B x P) batch.  Returns lists of hidden
    states, STOP probabilities and topic vectors, one entry per step.
    """
    if not 1 <= n_sent <= cfg.s_max:
        raise ValueError(f"sentence count {n_sent} outside [1, {cfg.s_max}]")
    p = _as_tensors(params)
    v = nx.as_tensor(v_p)
    if v.data.ndim == 1:
        v = nx.reshape(v, (1, -1))
    zeros = np.zeros((v.shape[0], cfg.hidden), dtype=v.data.dtype)
    h, c = nx.Tensor(zeros), nx.Tensor(zeros)
    hs, probs, topics = [], [], []
    for _ in range(n_sent):
        h, c, logit, topic = _sentence_step(v, h, c, p)
        hs.append(h)
        probs.append(nx.sigmoid(logit))
        topics.append(topic)
    return hs, probs, topics


def _word_logits(x0: nx.Tensor, tokens: np.ndarray, p: Mapping[str, nx.Tensor], hidden: int) -> nx.Tensor:
    """Teacher-forced word LSTM.

    ``x0`` (R x E) is the first input of each row; ``tokens`` (R x T) holds the
    inputs that follow, beginning with START.  Returns (R*T x V) logits,
    step-major, for every step after the first.
    """
    rows, steps = tokens.shape
    zeros = np.zeros((rows, hidden), dtype=x0.data.dtype)
    h0 = c0 = h1 = c1 = nx.Tensor(zeros)
    h0, c0 = nx.lstm_cell(x0, h0, c0, p["word0.W"], p["word0.b"])
    h1, c1 = nx.lstm_cell(h0, h1, c1, p["word1.W"], p["word1.b"])
    outs = []
    for t in range(steps):
        x = nx.take_rows(p["embed"], tokens[:, t])
        h0, c0 = nx.lstm_cell(x, h0, c0, p["word0.W"], p["word0.b"])
        h1, c1 = nx.lstm_cell(h0, h1, c1, p["word1.W"], p["word1.b"])
        outs.append(h1)
    return nx.linear(nx.concat(outs, axis=0), p["out.W"], p["out.b"])


def _teacher_batch(sequences: Sequence[Sequence[int]], final: int | None, vocab: int):
    """Input ids, targets and weights for teacher forcing.

    Inputs are START followed by the sequence; targets are the sequence
    followed by ``final`` (omitted when None).  Arrays are (R x T) and the
    flattened targets/weights are step-major to match :func:`_word_logits`.
    """
    tail = [] if final is None else [final]
    targets_rows = [list(s) + tail for s in sequences]
    for row in targets_rows:
        if any(t < 0 or t >= vocab for t in row):
            raise IndexError(f"token id out of range for vocabulary of {vocab}")
    steps = max(len(r) for r in targets_rows)
    inputs = np.full((len(sequences), steps), PAD_ID, dtype=np.int64)
    targets = np.full((len(sequences), steps), PAD_ID, dtype=np.int64)
    weights = np.zeros((len(sequences), steps))
    for r, row in enumerate(targets_rows):
        inputs[r, 0] = START_ID
        inputs[r, 1 : len(row)] = row[:-1]
        targets[r, : len(row)] = row
        weights[r, : len(row)] = 1.0
    return inputs, targets.T.reshape(-1), weights.T.reshape(-1)


def word_rnn_forward(topic, sentence: Sequence[int], params: Mapping, cfg: ModelConfig) -> nx.Tensor:
    """Logits (N+1 x V) for one sentence: each word, then END."""
    if len(sentence) > cfg.n_max:
        raise ValueError(f"sentence longer than N_MAX={cfg.n_max}")
    p = _as_tensors(params)
    t = nx.as_tensor(topic)
    if t.data.ndim == 1:
        t = nx.reshape(t, (1, -1))
    inputs, _, _ = _teacher_batch([sentence], END_ID, cfg.vocab)
    x0 = nx.linear(t, p["topic_proj.W"], p["topic_proj.b"])
    return _word_logits(x0, inputs, p, cfg.hidden)


# ---------------------------------------------------------------------------
# Loss


@dataclass
class ForwardTrace:
    loss: nx.Tensor
    loss_sent: float
    loss_word: float
    n_examples: int
    tensors: dict[str, nx.Tensor] = field(repr=False)
    pooled: np.ndarray | None = None
    stop_probs: list[np.ndarray] = field(default_factory=list)
    topics: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None
    supervised: int = 0

    @property
    def value(self) -> float:
        return float(self.loss.data)


def batch_loss(features: Sequence[np.ndarray], paragraphs: Sequence[Sequence[Sequence[int]]],
               params: Mapping[str, np.ndarray], cfg: ModelConfig, grad: bool = True) -> ForwardTrace:
    """Mean over the batch of per-example summed hierarchical losses."""
    if len(features) != len(paragraphs) or not paragraphs:
        raise ValueError("need one paragraph per feature set and a nonempty batch")
    for para in paragraphs:
        if not para or any(len(s) == 0 for s in para):
            raise ValueError("empty paragraph or sentence")
        if len(para) > cfg.s_max or any(len(s) > cfg.n_max for s in para):
            raise ValueError("paragraph exceeds S_MAX/N_MAX; truncate_paragraph() first")
    p = _wrap(params, grad)
    B = len(paragraphs)
    v = _pool_batch(features, p)
    counts = np.array([len(para) for para in paragraphs])
    s_top = int(counts.max())
    zeros = np.zeros((B, cfg.hidden), dtype=v.data.dtype)
    h, c = nx.Tensor(zeros), nx.Tensor(zeros)
    sent_terms, topics, probs = [], [], []
    for i in range(s_top):
        h, c, logit, topic = _sentence_step(v, h, c, p)
        stop = (counts - 1 == i).astype(float)
        active = (counts > i).astype(float)
        sent_terms.append(nx.sigmoid_cross_entropy(logit, stop, active))
        topics.append(topic)
        probs.append(1.0 / (1.0 + np.exp(-logit.data[:, 0])))
    loss_sent = nx.total(sent_terms)

    # sentence j of example b sits at row i*B + b of the stacked topics
    rows = [i * B + b for b in range(B) for i in range(counts[b])]
    sentences = [s for para in paragraphs for s in para]
    topic_rows = nx.take_rows(nx.concat(topics, axis=0), rows)
    x0 = nx.linear(topic_rows, p["topic_proj.W"], p["topic_proj.b"])
    inputs, targets, weights = _teacher_batch(sentences, END_ID, cfg.vocab)
    logits = _word_logits(x0, inputs, p, cfg.hidden)
    loss_word = nx.softmax_cross_entropy(logits, targets, weights)

    loss = nx.scale(nx.add(nx.scale(loss_sent, cfg.lambda_sent), nx.scale(loss_word, cfg.lambda_word)), 1.0 / B)
    return ForwardTrace(
        loss=loss,
        loss_sent=float(loss_sent.data) / B,
        loss_word=float(loss_word.data) / B,
        n_examples=B,
        tensors=p,
        pooled=v.data,
        stop_probs=[np.array([probs[i][b] for i in range(counts[b])]) for b in range(B)],
        topics=[np.stack([topics[i].data[b] for i in range(counts[b])]) for b in range(B)],
        logits=logits.data,
        supervised=int(weights.sum()),
    )


def paragraph_loss(features: np.ndarray, paragraph: Sequence[Sequence[int]], params: Mapping[str, np.ndarray],
                   cfg: ModelConfig, grad: bool = True) -> tuple[float, ForwardTrace]:
    """Summed loss for one image: weighted halting plus word cross-entropy."""
    trace = batch_loss([np.asarray(features)], [paragraph], params, cfg, grad=grad)
    return trace.value, trace


def backward(trace: ForwardTrace, params: Mapping[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    """Gradients of ``trace.loss`` for every parameter (zeros where untouched)."""
    trace.loss.backward()
    grads: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, arr in params.items():
        t = trace.tensors.get(name)
        g = None if t is None else t.grad
        grads[name] = np.zeros_like(arr) if g is None else g
    return grads


def loss_and_grads(params, features, paragraphs, cfg: ModelConfig, kind: str = HIERARCHICAL, trainable=None):
    fn = batch_loss if kind == HIERARCHICAL else flat_batch_loss
    trace = fn(features, paragraphs, params, cfg)
    grads = backward(trace, params)
    if trainable is not None:
        grads = OrderedDict((n, g) for n, g in grads.items() if n in trainable)
    return trace, grads


def pool_tie_skip(params: Mapping[str, np.ndarray], features: Sequence[np.ndarray], eps: float):
    """Skip predicate for grad_check: pooled coordinates whose top two
    projected candidates are closer than 10*eps (scaled by the input size)."""
    W, b = params["pool.W"], params["pool.b"]
    tied = np.zeros(W.shape[0], dtype=bool)
    for f in features:
        proj = f @ W.T + b
        if proj.shape[0] < 2:
            continue
        top2 = np.sort(proj, axis=0)[-2:]
        tol = 10 * eps * max(1.0, float(np.abs(f).max()))
        tied |= (top2[1] - top2[0]) < tol
    D = W.shape[1]

    def skip(name: str, k: int) -> bool:
        if name == "pool.W":
            return bool(tied[k // D])
        if name == "pool.b":
            return bool(tied[k])
        return False

    return skip


# ---------------------------------------------------------------------------
# Generation


def _greedy_words(x0: nx.Tensor, p: Mapping[str, nx.Tensor], cfg: ModelConfig, stop_ids: tuple[int, ...],
                  max_len: int) -> list[list[int]]:
    rows = x0.shape[0]
    zeros = np.zeros((rows, cfg.hidden), dtype=x0.data.dtype)
    h0 = c0 = h1 = c1 = nx.Tensor(zeros)
    h0, c0 = nx.lstm_cell(x0, h0, c0, p["word0.W"], p["word0.b"])
    h1, c1 = nx.lstm_cell(h0, h1, c1, p["word1.W"], p["word1.b"])
    tokens = np.full(rows, START_ID, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(rows)]
    done = np.zeros(rows, dtype=bool)
    for _ in range(max_len):
        x = nx.take_rows(p["embed"], tokens)
        h0, c0 = nx.lstm_cell(x, h0, c0, p["word0.W"], p["word0.b"])
        h1, c1 = nx.lstm_cell(h0, h1, c1, p["word1.W"], p["word1.b"])
        logits = nx.linear(h1, p["out.W"], p["out.b"]).data
        tokens = np.argmax(logits, axis=1)
        for r in range(rows):
            if done[r]:
                continue
            tok = int(tokens[r])
            out[r].append(tok)
            if tok in stop_ids:
                done[r] = True
        if done.all():
            break
    return out


def halting_probs(features: np.ndarray, params: Mapping, cfg: ModelConfig, k: int | None = None) -> np.ndarray:
    """STOP probabilities for all S_MAX sentence steps."""
    v = pool_regions(features, params, k)
    _, probs, _ = sentence_rnn_forward(v, cfg.s_max, params, cfg)
    return np.array([float(pr.data[0, 0]) for pr in probs])


def generate(features: np.ndarray, params: Mapping[str, np.ndarray], cfg: ModelConfig,
             k: int | None = None) -> list[list[int]]:
    """Greedy paragraph: sentences until p(STOP) > T_STOP or S_MAX, each
    decoded word by word until END or N_MAX tokens."""
    p = _wrap(params, False)
    v = nx.reshape(pool_regions(features, p, k), (1, -1))
    zeros = np.zeros((1, cfg.hidden), dtype=v.data.dtype)
    h, c = nx.Tensor(zeros), nx.Tensor(zeros)
    topics = []
    for _ in range(cfg.s_max):
        h, c, logit, topic = _sentence_step(v, h, c, p)
        topics.append(topic)
        if nx.sigmoid(logit).data[0, 0] > cfg.t_stop:
            break
    x0 = nx.linear(nx.concat(topics, axis=0), p["topic_proj.W"], p["topic_proj.b"])
    sentences = _greedy_words(x0, p, cfg, (END_ID,), cfg.n_max)
    return [[t for t in s if t != END_ID] for s in sentences]


def generate_topk(features: np.ndarray, k: int, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> list[list[int]]:
    """:func:`generate` pooling over only the first ``k`` (highest-scoring) regions."""
    return generate(features, params, cfg, k=k)


# ---------------------------------------------------------------------------
# Flat baseline


def flat_vocab(vocab: Vocabulary) -> Vocabulary:
    """The hierarchical vocabulary plus a paragraph-end token."""
    return vocab if EOP in vocab else vocab.with_tokens([EOP])


def flatten_paragraph(paragraph: Sequence[Sequence[int]], eop_id: int) -> list[int]:
    """Sentences joined into one stream, END after each, ``eop_id`` last."""
    stream: list[int] = []
    for sent in paragraph:
        stream.extend(sent)
        stream.append(END_ID)
    stream.append(eop_id)
    return stream


def unflatten_stream(stream: Sequence[int], eop_id: int) -> list[list[int]]:
    sentences, cur = [], []
    for tok in stream:
        if tok == eop_id:
            break
        if tok == END_ID:
            if cur:
                sentences.append(cur)
            cur = []
        else:
            cur.append(tok)
    if cur:
        sentences.append(cur)
    return sentences


def flat_batch_loss(features: Sequence[np.ndarray], paragraphs: Sequence[Sequence[Sequence[int]]],
                    params: Mapping[str, np.ndarray], cfg: ModelConfig, grad: bool = True) -> ForwardTrace:
    """Teacher-forced loss of the flat decoder over whole-paragraph streams.

    ``cfg.vocab`` counts the paragraph-end token, which is the last id.
    """
    if len(features) != len(paragraphs) or not paragraphs:
        raise ValueError("need one paragraph per feature set and a nonempty batch")
    eop = cfg.vocab - 1
    p = _wrap(params, grad)
    B = len(paragraphs)
    v = _pool_batch(features, p)
    x0 = nx.linear(v, p["topic_proj.W"], p["topic_proj.b"])
    streams = [flatten_paragraph(para, eop) for para in paragraphs]
    inputs, targets, weights = _teacher_batch(streams, None, cfg.vocab)
    logits = _word_logits(x0, inputs, p, cfg.hidden)
    loss_word = nx.softmax_cross_entropy(logits, targets, weights)
    loss = nx.scale(loss_word, cfg.lambda_word / B)
    return ForwardTrace(loss=loss, loss_sent=0.0, loss_word=float(loss_word.data) / B, n_examples=B,
                        tensors=p, pooled=v.data, logits=logits.data, supervised=int(weights.sum()))


def flat_forward(features: np.ndarray, paragraph, params, cfg: ModelConfig, grad: bool = True):
    trace = flat_batch_loss([np.asarray(features)], [paragraph], params, cfg, grad=grad)
    return trace.value, trace


def flat_generate(features: np.ndarray, params: Mapping[str, np.ndarray], cfg: ModelConfig,
                  k: int | None = None) -> list[list[int]]:
    """Greedy whole-paragraph stream until the paragraph-end token or S_MAX*N_MAX tokens."""
    p = _wrap(params, False)
    eop = cfg.vocab - 1
    v = nx.reshape(pool_regions(features, p, k), (1, -1))
    x0 = nx.linear(v, p["topic_proj.W"], p["topic_proj.b"])
    stream = _greedy_words(x0, p, cfg, (eop,), cfg.s_max * cfg.n_max)[0]
    return unflatten_stream(stream, eop)


# ---------------------------------------------------------------------------
# Caption language model (single region, single sentence)


def caption_batch_loss(features: Sequence[np.ndarray], sentences: Sequence[Sequence[int]],
                       params: Mapping[str, np.ndarray], cfg: ModelConfig, grad: bool = True) -> ForwardTrace:
    """Word loss of one caption per region set; the projected region is the topic."""
    p = _wrap(params, grad)
    B = len(sentences)
    topic = _pool_batch(features, p)
    x0 = nx.linear(topic, p["topic_proj.W"], p["topic_proj.b"])
    inputs, targets, weights = _teacher_batch(sentences, END_ID, cfg.vocab)
    logits = _word_logits(x0, inputs, p, cfg.hidden)
    loss_word = nx.softmax_cross_entropy(logits, targets, weights)
    loss = nx.scale(loss_word, cfg.lambda_word / B)
    return ForwardTrace(loss=loss, loss_sent=0.0, loss_word=float(loss_word.data) / B, n_examples=B,
                        tensors=p, pooled=topic.data, logits=logits.data, supervised=int(weights.sum()))


def caption_generate(features: np.ndarray, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> list[int]:
    p = _wrap(params, False)
    v = nx.reshape(pool_regions(features, p), (1, -1))
    x0 = nx.linear(v, p["topic_proj.W"], p["topic_proj.b"])
    out = _greedy_words(x0, p, cfg, (END_ID,), cfg.n_max)[0]
    return [t for t in out if t != END_ID]


def teacher_forced_accuracy(trace: ForwardTrace, targets: np.ndarray, weights: np.ndarray) -> float:
    pred = np.argmax(trace.logits, axis=1)
    mask = weights > 0
    return float((pred[mask] == targets[mask]).mean())


def token_accuracy(features, paragraphs, params, cfg: ModelConfig, kind: str = HIERARCHICAL) -> float:
    """Fraction of supervised positions whose argmax equals the target."""
    if kind == HIERARCHICAL:
        trace = batch_loss(features, paragraphs, params, cfg, grad=False)
        _, targets, weights = _teacher_batch([s for para in paragraphs for s in para], END_ID, cfg.vocab)
    elif kind == FLAT:
        trace = flat_batch_loss(features, paragraphs, params, cfg, grad=False)
        streams = [flatten_paragraph(para, cfg.vocab - 1) for para in paragraphs]
        _, targets, weights = _teacher_batch(streams, None, cfg.vocab)
    else:
        trace = caption_batch_loss(features, paragraphs, params, cfg, grad=False)
        _, targets, weights = _teacher_batch(paragraphs, END_ID, cfg.vocab)
    return teacher_forced_accuracy(trace, targets, weights)
