"""Graph self-supervised pre-training with explicitly generated relation graphs."""

__version__ = "0.1.0"
