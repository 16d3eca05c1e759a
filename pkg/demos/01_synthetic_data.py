"""A look at the synthetic region/paragraph benchmark.

Every image is a handful of region vectors: one per object (a type
prototype plus a per-template variant plus noise) and a few low-norm
distractors.  Its paragraph describes the objects one sentence each, in a
fixed type order, so both *what* to say and *how many* sentences to say are
recoverable from the regions.
"""

import numpy as np

from hierpara import corpus as C
from hierpara import metrics

cfg = C.SynthConfig(n_train=200, n_val=20, n_test=20, seed=0)
records = C.synth_generate(cfg, s_max=6)
train = C.split_records(records, "train")

print("A few training images:\n")
for rec in train[:4]:
    norms = np.linalg.norm(rec.features, axis=1).round(1)
    print(f"{rec.id}: {rec.features.shape[0]} regions, row norms {norms.tolist()}")
    print(f"  objects {rec.extra['objects']} at rows {rec.extra['object_rows']}")
    print(f"  {rec.text}\n")

# The same statistics the `stats` command reports.
st = metrics.corpus_stats([r.paragraph for r in train])
print(f"{st.n_paragraphs} paragraphs: {st.avg_length:.1f} tokens on average (std {st.length_std:.1f}), "
      f"{st.avg_sentences:.2f} sentences of {st.avg_sentence_length:.2f} tokens, vocabulary {st.vocab_size}, "
      f"diversity {st.diversity:.1f}")

vocab = C.build_vocab([r.paragraph for r in train], min_count=1)
print(f"\nvocabulary ({len(vocab)} ids, 4 reserved): {vocab.itos}")
