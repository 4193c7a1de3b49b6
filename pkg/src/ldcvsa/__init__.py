"""Low-dimensional binary VSA classifiers trained with BN and KD assistance."""

__version__ = "0.1.0"
