"""Ghost points and abrupt learning: toy model, low-rank RNNs, latent analysis."""

__version__ = "0.1.0"
