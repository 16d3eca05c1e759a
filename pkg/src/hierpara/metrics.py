"""BLEU, CIDEr, within-paragraph diversity and corpus statistics.

All scores operate on token lists.  CIDEr is reported on a 0-100 scale
(identical texts score 100), which is also the scale diversity uses.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

Tokens = Sequence[str]

BLEU_EPS = 1e-9
CIDER_SIGMA = 6.0


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


@dataclass
class BleuScore:
    scores: tuple[float, ...]  # BLEU-1 .. BLEU-max_n, in [0, 1]
    matches: tuple[int, ...]
    totals: tuple[int, ...]
    brevity_penalty: float
    cand_len: int
    ref_len: int


def _closest_ref_len(cand_len: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def _bleu_from_counts(matches, totals, cand_len, ref_len, max_n) -> BleuScore:
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len)) if cand_len > 0 else 0.0
    log_p = [math.log(m / t) if m > 0 else math.log(BLEU_EPS) for m, t in zip(matches, totals)]
    scores = tuple(bp * math.exp(sum(log_p[:n]) / n) for n in range(1, max_n + 1))
    return BleuScore(scores, tuple(matches), tuple(totals), bp, cand_len, ref_len)


def _bleu_counts(candidate: Tokens, references: Sequence[Tokens], max_n: int):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        best: Counter = Counter()
        for ref in references:
            best |= ngrams(ref, n)
        matches.append(sum(min(c, best[g]) for g, c in cand.items()))
        totals.append(max(0, len(candidate) - n + 1))
    return matches, totals


def bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4) -> BleuScore:
    """Sentence BLEU with clipped counts and the closest-length brevity penalty.

    A zero n-gram precision enters the geometric mean as 1e-9.
    """
    if not candidate:
        raise ValueError("empty candidate")
    if not references:
        raise ValueError("at least one reference is required")
    matches, totals = _bleu_counts(candidate, references, max_n)
    ref_len = _closest_ref_len(len(candidate), (len(r) for r in references))
    return _bleu_from_counts(matches, totals, len(candidate), ref_len, max_n)


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> BleuScore:
    """Corpus BLEU: counts and lengths summed over all segments first."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("need one reference set per candidate and a nonempty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        m, t = _bleu_counts(cand, refs, max_n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), (len(r) for r in refs))
    if c_len == 0:
        return BleuScore((0.0,) * max_n, tuple(matches), tuple(totals), 0.0, 0, r_len)
    return _bleu_from_counts(matches, totals, c_len, r_len, max_n)


# ---------------------------------------------------------------------------
# CIDEr


@dataclass
class IdfTable:
    doc_freq: list[Counter]  # index n-1
    n_docs: int

    def idf(self, gram: tuple) -> float:
        df = self.doc_freq[len(gram) - 1].get(gram, 0)
        return math.log(self.n_docs / max(df, 1))

    def scaled(self, factor: float) -> "ScaledIdf":
        return ScaledIdf(self, factor)


@dataclass
class ScaledIdf:
    """An idf table with every weight multiplied by a constant."""

    base: IdfTable
    factor: float

    def idf(self, gram: tuple) -> float:
        return self.factor * self.base.idf(gram)


def build_idf(documents: Iterable, max_n: int = 4) -> IdfTable:
    """Document frequencies of 1..max_n-grams.

    A document is a token list, or a list of token lists (e.g. all
    references of one image); an n-gram counts once per document.
    """
    df = [Counter() for _ in range(max_n)]
    count = 0
    for doc in documents:
        texts = [doc] if not doc or isinstance(doc[0], str) else doc
        count += 1
        for n in range(1, max_n + 1):
            seen: set = set()
            for text in texts:
                seen.update(ngrams(text, n))
            df[n - 1].update(seen)
    if count == 0:
        raise ValueError("idf corpus is empty")
    return IdfTable(df, count)


def _tfidf(tokens: Tokens, n: int, idf) -> dict:
    return {g: c * idf.idf(g) for g, c in ngrams(tokens, n).items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider(candidate: Tokens, references: Sequence[Tokens], idf, max_n: int = 4,
          sigma: float = CIDER_SIGMA) -> float:
    """Mean over n and references of tf-idf cosine times a gaussian length
    penalty, scaled so that a perfect match scores 100."""
    if not references:
        raise ValueError("at least one reference is required")
    per_n = []
    for n in range(1, max_n + 1):
        vc = _tfidf(candidate, n, idf)
        sims = []
        for ref in references:
            penalty = math.exp(-((len(candidate) - len(ref)) ** 2) / (2 * sigma**2))
            sims.append(_cosine(vc, _tfidf(ref, n, idf)) * penalty)
        per_n.append(sum(sims) / len(sims))
    return 100.0 * sum(per_n) / max_n


def corpus_cider(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], idf=None) -> float:
    """Mean per-image CIDEr; idf defaults to the reference sets themselves."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("need one reference set per candidate and a nonempty corpus")
    if idf is None:
        idf = build_idf(references)
    return float(np.mean([cider(c, r, idf) for c, r in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# Diversity and statistics


def diversity(paragraph: Sequence[Tokens], idf) -> float:
    """100 minus the mean CIDEr between ordered pairs of distinct sentences."""
    if len(paragraph) < 2:
        raise ValueError("diversity needs at least two sentences")
    sims = [cider(a, [b], idf) for i, a in enumerate(paragraph) for j, b in enumerate(paragraph) if i != j]
    return 100.0 - sum(sims) / len(sims)


def sentence_idf(paragraphs: Iterable[Sequence[Tokens]]) -> IdfTable:
    """idf over every individual sentence of a collection."""
    return build_idf([s for p in paragraphs for s in p])


@dataclass
class CorpusStats:
    n_paragraphs: int
    avg_length: float
    length_std: float
    avg_sentence_length: float
    avg_sentences: float
    vocab_size: int
    diversity: float | None


def corpus_stats(paragraphs: Sequence[Sequence[Tokens]], idf=None) -> CorpusStats:
    """Length, sentence-length, vocabulary and diversity statistics.

    Diversity is averaged over paragraphs with two or more sentences and is
    None when there are none.
    """
    if not paragraphs:
        raise ValueError("no paragraphs")
    lengths = np.array([sum(len(s) for s in p) for p in paragraphs], dtype=float)
    sent_lens = [len(s) for p in paragraphs for s in p]
    vocab = {t for p in paragraphs for s in p for t in s}
    multi = [p for p in paragraphs if len(p) >= 2]
    div = None
    if multi:
        idf = idf if idf is not None else sentence_idf(paragraphs)
        div = float(np.mean([diversity(p, idf) for p in multi]))
    return CorpusStats(
        n_paragraphs=len(paragraphs),
        avg_length=float(lengths.mean()),
        length_std=float(lengths.std()),
        avg_sentence_length=float(np.mean(sent_lens)),
        avg_sentences=float(np.mean([len(p) for p in paragraphs])),
        vocab_size=len(vocab),
        diversity=div,
    )


@dataclass
class ScoreReport:
    bleu: tuple[float, ...]  # BLEU-1..4 in [0, 1]
    cider: float  # 0-100
    bleu_matches: tuple[int, ...] = ()
    bleu_totals: tuple[int, ...] = ()
    stats: CorpusStats | None = None
    reference_stats: CorpusStats | None = None
    extra: dict = field(default_factory=dict)

    @property
    def selection_score(self) -> float:
        """CIDEr + 100 * BLEU-4, used to pick checkpoints."""
        return self.cider + 100.0 * self.bleu[3]

    def to_dict(self) -> dict:
        d = {f"bleu{n + 1}": 100.0 * b for n, b in enumerate(self.bleu)}
        d["cider"] = self.cider
        d["bleu_matches"] = list(self.bleu_matches)
        d["bleu_totals"] = list(self.bleu_totals)
        if self.stats is not None:
            d["stats"] = asdict(self.stats)
        if self.reference_stats is not None:
            d["reference_stats"] = asdict(self.reference_stats)
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self, name: str = "model") -> str:
        cols = ["METEOR", "CIDEr", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4"]
        vals = ["-", f"{self.cider:.2f}"] + [f"{100 * b:.2f}" for b in self.bleu]
        width = max(len(name), 12)
        lines = [f"{'Method':<{width}} " + " ".join(f"{c:>8}" for c in cols),
                 f"{name:<{width}} " + " ".join(f"{v:>8}" for v in vals)]
        for label, st in (("predictions", self.stats), ("references", self.reference_stats)):
            if st is None:
                continue
            div = "-" if st.diversity is None else f"{st.diversity:.2f}"
            lines.append("")
            lines.append(f"[{label}] length {st.avg_length:.2f} (std {st.length_std:.2f}), "
                         f"sentence length {st.avg_sentence_length:.2f}, sentences {st.avg_sentences:.2f}, "
                         f"vocab {st.vocab_size}, diversity {div}")
        return "\n".join(lines)


def score_paragraphs(predictions: Sequence[Sequence[Tokens]], references: Sequence[Sequence[Tokens]],
                     with_stats: bool = True) -> ScoreReport:
    """Corpus BLEU and CIDEr of flattened paragraphs against one reference each."""
    cands = [[t for s in p for t in s] for p in predictions]
    refs = [[[t for s in p for t in s]] for p in references]
    b = corpus_bleu(cands, refs)
    idf = build_idf(refs)
    c = corpus_cider(cands, refs, idf)
    stats = ref_stats = None
    if with_stats:
        stats = corpus_stats([p if p else [[]] for p in predictions])
        ref_stats = corpus_stats(references)
    return ScoreReport(b.scores, c, b.matches, b.totals, stats, ref_stats)
