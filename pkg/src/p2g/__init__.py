"""Point-to-Gaussian image-to-3D pipeline.

A differentiable tile-based Gaussian splatting renderer, point-cloud
kernels, a cross-modality fusion generator (point feature extraction +
pose-aware projection + cross-attention), training losses with annealed
point-cloud shaping, and a synthetic-scene training/evaluation harness.
"""

__version__ = "0.1.0"

from .accel import backend_name  # noqa: F401
