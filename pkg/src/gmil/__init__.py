"""Guided multiple-instance learning on ordered bags.

Synthetic benchmark generation with exact posterior oracles, attention-based
bag classifiers, guidance regularisers that pull attention toward a
location-aware reference, and the training / evaluation machinery to compare
them under a shared protocol.
"""

from .backend import BACKEND_NAME

__all__ = ["BACKEND_NAME", "__version__"]

__version__ = "0.1.0"
