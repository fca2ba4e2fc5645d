"""Sensing-conditioned diffusion denoising of cell-free ISAC channel estimates."""
