"""Full-reference per-pixel metric responses and p95 normalization."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import correlate1d

from . import nn
from .imaging import Image, PatchRect, ResponseMap, as_array

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class MetricKind(str, Enum):
    MSE = "mse"
    DSSIM = "dssim"
    FEATURE = "feature"


@dataclass(frozen=True)
class Normalizer:
    p95: float

    def __post_init__(self):
        if not (self.p95 > 0 and np.isfinite(self.p95)):
            raise ValueError(f"p95 must be positive and finite, got {self.p95}")


def _pair(a, b):
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse_map(a, b) -> ResponseMap:
    """Mean over channels of the squared per-pixel difference."""
    a, b = _pair(a, b)
    return ResponseMap(np.mean(np.square(a - b), axis=2))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _luma(x: np.ndarray) -> np.ndarray:
    return x[..., 0] if x.shape[2] == 1 else Image(x).luma()


def ssim_index(a, b) -> np.ndarray:
    """Per-pixel SSIM on luma; border windows are cropped and renormalized."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    x, y = _luma(a), _luma(b)
    g = gaussian_window()

    def blur(z):
        z = correlate1d(z, g, axis=0, mode="constant", cval=0.0)
        return correlate1d(z, g, axis=1, mode="constant", cval=0.0)

    # separable window: cropped mass factorizes into row and column sums
    norm = blur(np.ones_like(x))
    mx, my = blur(x) / norm, blur(y) / norm
    sxx = blur(x * x) / norm - mx * mx
    syy = blur(y * y) / norm - my * my
    sxy = blur(x * y) / norm - mx * my
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def dssim_map(a, b) -> ResponseMap:
    """``1 - SSIM`` per pixel (0 means identical)."""
    return ResponseMap(np.maximum(1.0 - ssim_index(a, b), 0.0))


# ---------------------------------------------------------------------------
# deep-feature distance
# ---------------------------------------------------------------------------


@dataclass
class FeatureNet:
    """Feed-forward conv/ReLU/max-pool stack; responses are taken at its last layer."""

    spec: nn.NetworkSpec
    params: nn.ParamStore

    def __post_init__(self):
        for layer in self.spec.layers:
            if layer.kind == nn.Kind.DENSE:
                raise ValueError("feature networks must be fully convolutional")

    @classmethod
    def load(cls, path) -> "FeatureNet":
        spec, params = nn.load_weights(path)
        return cls(spec, params)

    def truncated(self, n_layers: int) -> "FeatureNet":
        spec = nn.NetworkSpec(self.spec.layers[:n_layers])
        return FeatureNet(spec, nn.ParamStore(spec, self.params.flat[: spec.param_count].copy()))

    @property
    def min_size(self) -> int:
        return 2 ** sum(layer.kind == nn.Kind.MAXPOOL2 for layer in self.spec.layers)

    def features(self, img: np.ndarray) -> np.ndarray:
        params = self.params.astype(np.float64)
        out, _ = nn.forward(self.spec, params, img[None].astype(np.float64))
        return out[0]


def bilinear_resize(m: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a 2-D map, edge-clamped."""
    h, w = m.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    y0, y1, fy = coords(height, h)
    x0, x1, fx = coords(width, w)
    top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1] * fx
    bot = m[y1][:, x0] * (1 - fx) + m[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def feature_metric_map(a, b, net: FeatureNet | None) -> ResponseMap:
    """Euclidean distance of feature vectors per location, upsampled to pixels."""
    if net is None:
        raise ValueError("feature metric needs loaded network weights")
    a, b = _pair(a, b)
    if min(a.shape[:2]) < net.min_size:
        raise ValueError(f"image smaller than the network footprint ({net.min_size} px)")
    fa, fb = net.features(a), net.features(b)
    dist = np.sqrt(np.sum(np.square(fa - fb), axis=-1))
    return ResponseMap(bilinear_resize(dist, a.shape[0], a.shape[1]))


def metric_map(kind: MetricKind | str, a, b, net: FeatureNet | None = None) -> ResponseMap:
    kind = MetricKind(kind)
    if kind == MetricKind.MSE:
        return mse_map(a, b)
    if kind == MetricKind.DSSIM:
        return dssim_map(a, b)
    return feature_metric_map(a, b, net)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile at rank ``q * (n - 1)`` of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty list")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    r = q * (v.size - 1)
    lo = int(np.floor(r))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (r - lo) * (v[hi] - v[lo]))


def normalize(m: ResponseMap, n: Normalizer) -> ResponseMap:
    """Divide by p95. Values above 1 are kept."""
    return ResponseMap(as_array(m).astype(np.float64) / n.p95)


def patch_response(m, r: PatchRect) -> float:
    a = as_array(m)
    if not r.inside(a.shape[1], a.shape[0]):
        raise ValueError(f"patch {r} outside {a.shape[1]}x{a.shape[0]} map")
    return float(a[r.slices()].mean(dtype=np.float64))
