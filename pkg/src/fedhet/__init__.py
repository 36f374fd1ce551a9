"""Deterministic lab for studying data-heterogeneity effects in federated learning.

Pipeline: train a task model centrally, extract penultimate-layer embeddings,
cluster them with K-means, allocate clusters to clients with a Dirichlet draw,
then run federated training over the resulting partition and compare against
the classic class-label Dirichlet split.
"""

__version__ = "0.1.0"

from .errors import (
    AllocationError,
    ConfigError,
    DivergedClientError,
    InvalidParameterError,
    ParseError,
    ShapeError,
)
from .rng import RngStream

__all__ = [
    "AllocationError",
    "ConfigError",
    "DivergedClientError",
    "InvalidParameterError",
    "ParseError",
    "RngStream",
    "ShapeError",
    "__version__",
]
