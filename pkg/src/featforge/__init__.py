"""Feature-transformation search teaming a latent-space sequence model with a local LM."""

__version__ = "0.1.0"
