"""Online dense reconstruction with a sparse grid of local latent codes."""

__version__ = "0.1.0"
