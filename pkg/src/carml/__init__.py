"""Unsupervised meta-RL curriculum: a mixture-model task scaffold feeding a recurrent meta-policy."""

__version__ = "0.1.0"
