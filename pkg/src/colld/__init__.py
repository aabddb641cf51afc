"""Contrastive layer-to-layer distillation of Conformer encoders, in numpy."""

__version__ = "0.1.0"
