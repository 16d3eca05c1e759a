"""Hierarchical decoder versus a single flat LSTM with the same parameter count.

The flat baseline reads the pooled regions once and emits the whole
paragraph as one token stream, ending sentences with END and the paragraph
with an extra paragraph-end token.  Its hidden size is widened until its
parameter count matches the hierarchical model.  Both are trained on the same
data with the same optimizer settings, and the best validation CIDEr of each
run is compared.
"""

import numpy as np

from hierpara import corpus as C
from hierpara import model as M
from hierpara import training as T

STEPS = 3000
SEEDS = (0, 1, 2)

records = C.synth_generate(C.SynthConfig(n_train=300, n_val=50, n_test=0, seed=11), s_max=6)
train, val = C.split_records(records, "train"), C.split_records(records, "val")

scores = {}
for kind in (M.HIERARCHICAL, M.FLAT):
    scores[kind] = []
    for seed in SEEDS:
        run = T.RunConfig(kind=kind, max_steps=STEPS, lr=2e-3, val_interval=500, log_interval=500,
                          min_count=1, seed=seed, match_budget=True)
        res = T.train(run, train, val)
        curve = [round(e["val_cider"], 1) for e in res.log if "val_cider" in e]
        scores[kind].append(max(curve))
        print(f"{kind:>12} seed {seed}: hidden {res.config.hidden}, "
              f"{M.count_params(res.config, kind)} parameters, val CIDEr by 500 steps {curve}")

for kind, vals in scores.items():
    print(f"{kind:>12}: best val CIDEr mean {np.mean(vals):.1f}  {vals}")
