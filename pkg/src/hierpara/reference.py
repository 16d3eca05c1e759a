"""Arbitrary-precision reference losses.

Straight-line re-implementations of the hierarchical and flat training
losses on Python lists of mpmath numbers.  They share no code with the
tensor path in :mod:`hierpara.model`, which makes them usable as the
numeric side of a gradient check: at 40 significant digits the roundoff in
a central difference with eps=1e-6 is far below the gradients being tested.
Only meant for tiny configurations.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import mpmath as mp
import numpy as np

from .corpus import END_ID, START_ID

DIGITS = 40


def _vec(a) -> list:
    return [mp.mpf(float(x)) for x in np.asarray(a).reshape(-1)]


def _mat(a) -> list[list]:
    return [[mp.mpf(float(x)) for x in row] for row in np.asarray(a)]


def _affine(W, b, x):
    return [mp.fdot(row, x) + bi for row, bi in zip(W, b)]


def _sig(z):
    return 1 / (1 + mp.exp(-z))


def _lstm(W, b, x, h, c):
    H = len(h)
    z = _affine(W, b, list(x) + list(h))
    i = [_sig(v) for v in z[:H]]
    f = [_sig(v) for v in z[H : 2 * H]]
    o = [_sig(v) for v in z[2 * H : 3 * H]]
    g = [mp.tanh(v) for v in z[3 * H :]]
    c2 = [fk * ck + ik * gk for fk, ck, ik, gk in zip(f, c, i, g)]
    h2 = [ok * mp.tanh(ck) for ok, ck in zip(o, c2)]
    return h2, c2


def _xent(logits, target):
    m = max(logits)
    return m + mp.log(mp.fsum(mp.exp(v - m) for v in logits)) - logits[target]


class _Weights:
    def __init__(self, params: Mapping[str, np.ndarray]):
        for name, arr in params.items():
            key = name.replace(".", "_")
            setattr(self, key, _mat(arr) if np.asarray(arr).ndim == 2 else _vec(arr))


def _pool(w: _Weights, features: np.ndarray):
    rows = [_affine(w.pool_W, w.pool_b, _vec(r)) for r in np.asarray(features)]
    return [max(col) for col in zip(*rows)]


def _word_stream_loss(w: _Weights, x0, inputs: Sequence[int], targets: Sequence[int], H: int):
    zero = [mp.mpf(0)] * H
    h0, c0 = _lstm(w.word0_W, w.word0_b, x0, zero, zero)
    h1, c1 = _lstm(w.word1_W, w.word1_b, h0, zero, zero)
    loss = mp.mpf(0)
    for tok, tgt in zip(inputs, targets):
        h0, c0 = _lstm(w.word0_W, w.word0_b, w.embed[tok], h0, c0)
        h1, c1 = _lstm(w.word1_W, w.word1_b, h0, h1, c1)
        loss += _xent(_affine(w.out_W, w.out_b, h1), tgt)
    return loss


def hierarchical_loss(params: Mapping[str, np.ndarray], features: Sequence[np.ndarray],
                      paragraphs: Sequence[Sequence[Sequence[int]]], cfg) -> mp.mpf:
    """Batch-mean of lambda_sent * halting BCE + lambda_word * word CE."""
    with mp.workdps(DIGITS):
        w = _Weights(params)
        H = cfg.hidden
        total = mp.mpf(0)
        for feats, para in zip(features, paragraphs):
            v = _pool(w, feats)
            h, c = [mp.mpf(0)] * H, [mp.mpf(0)] * H
            sent = word = mp.mpf(0)
            for i, sentence in enumerate(para):
                h, c = _lstm(w.sent_W, w.sent_b, v, h, c)
                s = mp.fdot(w.stop_W[0], h) + w.stop_b[0]
                # -log sigmoid(s) for STOP, -log(1 - sigmoid(s)) for CONTINUE
                sent += mp.log(1 + mp.exp(-s)) if i == len(para) - 1 else mp.log(1 + mp.exp(s))
                hidden = [max(z, 0) for z in _affine(w.topic1_W, w.topic1_b, h)]
                topic = _affine(w.topic2_W, w.topic2_b, hidden)
                x0 = _affine(w.topic_proj_W, w.topic_proj_b, topic)
                inputs = [START_ID] + list(sentence)
                targets = list(sentence) + [END_ID]
                word += _word_stream_loss(w, x0, inputs, targets, H)
            total += cfg.lambda_sent * sent + cfg.lambda_word * word
        return total / len(paragraphs)


def flat_loss(params: Mapping[str, np.ndarray], features: Sequence[np.ndarray],
              paragraphs: Sequence[Sequence[Sequence[int]]], cfg) -> mp.mpf:
    with mp.workdps(DIGITS):
        w = _Weights(params)
        eop = cfg.vocab - 1
        total = mp.mpf(0)
        for feats, para in zip(features, paragraphs):
            x0 = _affine(w.topic_proj_W, w.topic_proj_b, _pool(w, feats))
            stream = [t for s in para for t in list(s) + [END_ID]] + [eop]
            total += cfg.lambda_word * _word_stream_loss(w, x0, [START_ID] + stream[:-1], stream, cfg.hidden)
        return total / len(paragraphs)
