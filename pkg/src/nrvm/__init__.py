"""No-reference visibility maps for image-based rendering artifacts.

Predicts per-pixel full-reference metric maps (MSE, 1-SSIM, deep-feature
distance) from a distorted image alone, and uses the predictor to steer
adaptive light-field capture.
"""

from ._accel import backend
from .imaging import Image, ResponseMap
from .metrics import MetricKind, Normalizer

__version__ = "0.1.0"
