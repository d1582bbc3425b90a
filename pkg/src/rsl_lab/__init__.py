"""Reciprocal-supervised learning for sequence-to-sequence models on toy tasks.

Everything runs on numpy: a small reverse-mode autodiff engine, three
encoder-decoder families, beam and ensemble decoding, and the co-EM loop in
which each model learns from pseudo targets produced by its peers.
"""

__version__ = "0.1.0"
