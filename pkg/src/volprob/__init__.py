"""Probabilistic 3D segmentation toolkit.

A small U-Net with a latent conditional prior/posterior pair, optional
normalizing-flow posterior refinement, distance-based uncertainty
metrics, and a synthetic volumetric data pipeline. Built on a minimal
reverse-mode autodiff engine over float64 numpy arrays with a compiled
convolution core.
"""

__version__ = "0.1.0"

from . import kernels

__all__ = ["kernels", "__version__"]
