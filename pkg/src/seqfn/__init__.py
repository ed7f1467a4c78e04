"""Selective state-space protein sequence models: pretraining, fine-tuning and evaluation."""

__version__ = "0.1.0"
