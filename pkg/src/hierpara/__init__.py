"""Hierarchical paragraph generation from image regions, on numpy.

Modules: ``numerics`` (autodiff tensors, LSTM cell, Adam, gradient check),
``corpus`` (tokenizer, vocabulary, feature files, synthetic data), ``model``
(hierarchical and flat paragraph models), ``metrics`` (BLEU, CIDEr,
diversity), ``transfer`` (checkpoints, caption-LM transfer), ``training``
and ``cli``.
"""

__version__ = "0.1.0"
