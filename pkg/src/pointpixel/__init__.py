"""Contrastive pretraining over pairs of point-pixel pairs on synthetic RGB-D scenes."""

__version__ = "0.1.0"
