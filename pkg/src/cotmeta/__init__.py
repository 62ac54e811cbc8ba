"""Chain-of-thought subspace meta-learning for few-shot captioning, at desk scale."""

__version__ = "0.1.0"
