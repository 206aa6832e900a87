"""Exemplar-based image editing: capture an edit from an (original, edited)
pair in image-embedding and text space, then transfer it to a new image via
DDIM inversion plus feature/self-attention injection into a latent diffusion
backbone."""

__version__ = "0.1.0"
