"""Semantic-aware mask CycleGAN: masked adversarial training for unpaired image translation."""

__version__ = "0.1.0"
