"""Masked-autoencoder pretraining for point clouds with multi-view depth
reconstruction, on a self-contained float64 autodiff substrate."""

__version__ = "0.1.0"
