"""Masked multi-layer self-distillation pretraining at desk scale.

A small, fully deterministic implementation of hidden-layer self-distillation
for vision transformers: a rectangular block-mask engine (including a faithful
reproduction of the legacy sampler it improves on), an EMA teacher with
multi-depth z-scored targets, a backward-only MSE loss, frozen-encoder probes,
and representation-analysis tools (Pearson / linear CKA / spatial
autocorrelation).
"""

__version__ = "0.1.0"
