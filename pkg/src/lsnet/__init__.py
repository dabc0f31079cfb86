"""2.5D residual U-Net cascade for volumetric liver/lesion segmentation.

All numerics are implemented in-house: layer forward/backward passes with
compiled hot kernels (numpy fallback), the SGD training loop, volume
preprocessing, 3-D connected components, the coarse-to-fine inference
cascade, and the evaluation metrics.
"""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
