"""Checking the hand-written backward pass against finite differences.

On a tiny model (8-d regions, pool 6, hidden 5, embedding 6, 12 words) with
three regions and a two-sentence paragraph, every parameter coordinate is
perturbed by +-1e-6.  Many gradients are around 1e-4, where float64
roundoff in the difference quotient is larger than the tolerance, so the
quotient is formed from an independent 40-digit mpmath implementation of the
same loss.  The float64 version is shown for comparison.
"""

from hierpara.cli import run_grad_check, tiny_instance

cfg, feats, para, params = tiny_instance(seed=0)

print("float64 central differences:")
print(run_grad_check(cfg, [feats], [para], params, precise=False).format())

print("\n40-digit reference loss:")
print(run_grad_check(cfg, [feats], [para], params).format())
