"""Self-supervised domain adaptation experiments at desk scale."""

__version__ = "0.1.0"
