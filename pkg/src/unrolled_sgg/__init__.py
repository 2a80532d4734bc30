"""Unrolled graph-denoising message passing and diversity-regularized
relationship prediction for scene graphs, at desk scale."""

__version__ = "0.1.0"
