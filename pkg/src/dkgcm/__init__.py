"""Clustered spatio-temporal traffic forecasting: DTW node clustering,
per-cluster graph convolution, a bidirectional selective state-space
temporal stack, and a clipped group-relative policy term in the loss."""

__version__ = "0.1.0"

from ._kernels import BACKEND  # noqa: E402
from .config import RunConfig  # noqa: E402

__all__ = ["BACKEND", "RunConfig", "__version__"]
