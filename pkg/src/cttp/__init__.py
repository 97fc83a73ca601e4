"""Contrastive touch-to-touch pretraining on simulated tactile sensors."""

__version__ = "0.1.0"
