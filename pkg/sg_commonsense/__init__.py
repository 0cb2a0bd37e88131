"""Scene-graph commonsense: GLAT denoising autoencoder, perception simulation and fusion."""

__version__ = "0.1.0"
