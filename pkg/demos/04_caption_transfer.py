"""Warm-starting the word RNN from a caption language model.

A caption model sees one region and one sentence at a time, so it learns
the vocabulary and sentence shapes cheaply.  Its word LSTM, embedding rows
and output rows are copied into a fresh paragraph model (tokens it never saw
fall back to its UNK row), and we compare a short training budget against
training from scratch.
"""

import numpy as np

from hierpara import corpus as C
from hierpara import model as M
from hierpara import training as T
from hierpara import transfer as X

STEPS = 500
bench = C.SynthConfig(n_train=300, n_val=50, n_test=0, seed=11)
records = C.synth_generate(bench, s_max=6)
train, val = C.split_records(records, "train"), C.split_records(records, "val")
captions = C.synth_captions(bench, 2000, seed=5)
print("example caption:", C.detokenize(captions[0][1]))

vocab = C.build_vocab([r.paragraph for r in train], min_count=1)
results = []
for seed in (0, 1, 2):
    run = T.RunConfig(kind=M.FLAT, max_steps=STEPS, lr=2e-3, val_interval=STEPS, log_interval=100,
                      min_count=1, seed=seed)
    cfg, flat_vocab = T.model_setup(run, vocab, bench.dim)
    lm_log = []
    lm = X.pretrain_caption_lm(captions, M.ModelConfig(**{**cfg.to_dict(), "vocab": 1}), steps=500, lr=2e-3,
                               seed=seed, log=lm_log)
    mapping = X.vocab_mapping(flat_vocab, lm.vocab)
    missing = [flat_vocab.itos[i] for i, j in mapping.items() if j is None]
    init = X.transfer_init(M.init_params(cfg, seed=seed, kind=M.FLAT), cfg, lm, flat_vocab, mapping)

    scratch = T.train(run, train, val, vocab=vocab)
    warm = T.train(run, train, val, vocab=vocab, params=init)
    results.append((scratch.log[-1]["val_cider"], warm.log[-1]["val_cider"]))
    print(f"seed {seed}: caption loss {lm_log[0]['loss']:.2f} -> {lm_log[-1]['loss']:.2f}; "
          f"UNK-initialized {missing}; first-step loss scratch {scratch.log[0]['loss']:.2f} "
          f"vs transferred {warm.log[0]['loss']:.2f}; val CIDEr {results[-1][0]:.1f} vs {results[-1][1]:.1f}")

scratch, warm = np.mean(results, axis=0)
print(f"mean val CIDEr after {STEPS} steps: scratch {scratch:.1f}, transferred {warm:.1f}")
