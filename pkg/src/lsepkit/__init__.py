"""Flow-matching diffusion transformers with a jointly trained linear-probe regularizer."""

__version__ = "0.1.0"
