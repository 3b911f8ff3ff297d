"""Multimodal VAE fusion toolkit: variational fusion of per-utterance
modality features with downstream sentiment/emotion classifiers."""

__version__ = "0.1.0"
