"""Reasoning-tagged table-to-text generation at desk scale.

A small, fully testable stack: a numpy-backed autodiff engine, table
linearization and word-level vocabularies, a synthetic reasoning-tagged
corpus generator, per-category vector-quantized codebooks with
straight-through training, a transformer encoder-decoder with beam search,
two-stage training, and normative BLEU/ROUGE-L/PARENT evaluation.
"""

__version__ = "0.1.0"
