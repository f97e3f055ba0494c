"""Attentional text-to-image GAN with SE and local self-attention, on a toy shapes corpus."""

__version__ = "0.1.0"
