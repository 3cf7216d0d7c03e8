"""Video inpainting localisation: noise residuals, contrastive encoder, focal decoder."""

__version__ = "0.1.0"
