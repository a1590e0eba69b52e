"""Two-stage cloud removal: pixel restoration then latent diffusion refinement."""

__version__ = "0.1.0"
