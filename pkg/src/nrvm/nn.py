"""A small chain-structured CNN: layers, exact backprop, L1 loss, Adam, NNWT I/O.

Activations are NHWC. Convolution weights are stored (out, in, kh, kw) and
convolution is cross-correlation with zero "same" padding (k // 2) followed by
subsampling at the layer stride.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import kernels
from .imaging import crc32

NNWT_MAGIC = b"NNWT"
NNWT_VERSION = 1


class WeightsError(ValueError):
    pass


class Kind(IntEnum):
    CONV = 1
    RELU = 2
    DENSE = 3
    MAXPOOL2 = 4


@dataclass(frozen=True)
class LayerSpec:
    kind: Kind
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1

    @property
    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == Kind.CONV:
            return [(self.out_ch, self.in_ch, self.kernel, self.kernel), (self.out_ch,)]
        if self.kind == Kind.DENSE:
            return [(self.out_ch, self.in_ch), (self.out_ch,)]
        return []

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes)

    @property
    def fan_in(self) -> int:
        if self.kind == Kind.CONV:
            return self.in_ch * self.kernel * self.kernel
        return self.in_ch

    def dims(self) -> tuple[int, int, int, int]:
        if self.kind == Kind.CONV:
            return (self.out_ch, self.in_ch, self.kernel, self.stride)
        if self.kind == Kind.DENSE:
            return (self.out_ch, self.in_ch, 0, 0)
        if self.kind == Kind.MAXPOOL2:
            return (2, 2, 0, 0)
        return (0, 0, 0, 0)

    @classmethod
    def from_dims(cls, tag: int, dims) -> "LayerSpec":
        kind = Kind(tag)
        if kind == Kind.CONV:
            return conv(dims[1], dims[0], stride=dims[3], kernel=dims[2])
        if kind == Kind.DENSE:
            return dense(dims[1], dims[0])
        return cls(kind)


def conv(in_ch: int, out_ch: int, stride: int = 1, kernel: int = 3) -> LayerSpec:
    return LayerSpec(Kind.CONV, in_ch, out_ch, kernel, stride)


def relu() -> LayerSpec:
    return LayerSpec(Kind.RELU)


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec(Kind.DENSE, n_in, n_out)


def maxpool2() -> LayerSpec:
    return LayerSpec(Kind.MAXPOOL2)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def offsets(self) -> list[int]:
        out, acc = [], 0
        for layer in self.layers:
            out.append(acc)
            acc += layer.param_count
        return out

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape (H, W, C) or (F,)."""
        shape = tuple(input_shape)
        for layer in self.layers:
            if layer.kind == Kind.CONV:
                h, w, c = shape
                if c != layer.in_ch:
                    raise ValueError(f"conv expects {layer.in_ch} channels, got {c}")
                shape = ((h - 1) // layer.stride + 1, (w - 1) // layer.stride + 1, layer.out_ch)
            elif layer.kind == Kind.MAXPOOL2:
                h, w, c = shape
                shape = (h // 2, w // 2, c)
            elif layer.kind == Kind.DENSE:
                n = int(np.prod(shape))
                if n != layer.in_ch:
                    raise ValueError(f"dense expects {layer.in_ch} inputs, got {n}")
                shape = (layer.out_ch,)
        return shape


def default_architecture() -> NetworkSpec:
    """Five stride-2 3x3 conv+ReLU stages (32 -> 1 px) and a scalar dense head."""
    widths = [3, 16, 32, 64, 96, 112]
    layers: list[LayerSpec] = []
    for cin, cout in zip(widths[:-1], widths[1:]):
        layers += [conv(cin, cout, stride=2), relu()]
    layers.append(dense(widths[-1], 1))
    return NetworkSpec(tuple(layers))


class ParamStore:
    """Flat parameter vector with per-layer (weight, bias) views into it."""

    def __init__(self, spec: NetworkSpec, flat: np.ndarray | None = None, dtype=np.float32):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.param_count, dtype=dtype)
        flat = np.asarray(flat)
        if flat.shape != (spec.param_count,):
            raise ValueError(f"expected {spec.param_count} parameters, got {flat.shape}")
        self.flat = flat
        self.views: list[tuple[np.ndarray, np.ndarray] | None] = []
        for layer, off in zip(spec.layers, spec.offsets()):
            shapes = layer.param_shapes
            if not shapes:
                self.views.append(None)
                continue
            nw = int(np.prod(shapes[0]))
            w = flat[off : off + nw].reshape(shapes[0])
            b = flat[off + nw : off + nw + shapes[1][0]]
            self.views.append((w, b))

    @property
    def dtype(self):
        return self.flat.dtype

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(self.spec, self.flat.astype(dtype))

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, self.flat.copy())


def init_params(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParamStore:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamStore(spec, np.zeros(spec.param_count, dtype=np.float64))
    for layer, view in zip(spec.layers, params.views):
        if view is None:
            continue
        w, _ = view
        w[...] = rng.normal(0.0, np.sqrt(2.0 / layer.fan_in), size=w.shape)
    return params.astype(dtype)


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def conv_forward(x, w, b, stride: int = 1):
    """Cross-correlate NHWC ``x`` with (out, in, k, k) ``w``. Returns ``(y, cache)``."""
    n, h, wd, c = x.shape
    cout, cin, k, _ = w.shape
    if cin != c:
        raise ValueError(f"conv weight expects {cin} input channels, input has {c}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else np.ascontiguousarray(x)
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    cols = kernels.im2col(xp, k, stride, ho, wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
    y = cols @ wmat.T
    y += b
    return y.reshape(n, ho, wo, cout), (x.shape, cols, w, stride)


def conv_backward(gy, cache, need_input_grad: bool = True):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv_forward`.

    ``grad_x`` is None when ``need_input_grad`` is false.
    """
    (n, h, wd, c), cols, w, stride = cache
    cout, _, k, _ = w.shape
    p = k // 2
    _, ho, wo, _ = gy.shape
    g = gy.reshape(-1, cout)
    wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
    gw = (g.T @ cols).reshape(cout, k, k, c).transpose(0, 3, 1, 2)
    gb = g.sum(axis=0)
    if not need_input_grad:
        return None, gw, gb
    gcols = g @ wmat
    gxp = kernels.col2im(gcols, n, h + 2 * p, wd + 2 * p, c, k, stride, ho, wo)
    gx = gxp[:, p : p + h, p : p + wd, :] if p else gxp
    return gx, gw, gb


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(gy, x):
    return gy * (x > 0)


def dense_forward(x, w, b):
    xf = x.reshape(x.shape[0], -1)
    return xf @ w.T + b, (x.shape, xf, w)


def dense_backward(gy, cache):
    shape, xf, w = cache
    return (gy @ w).reshape(shape), gy.T @ xf, gy.sum(axis=0)


def maxpool2_forward(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, c)
    y = blocks.max(axis=(2, 4))
    return y, (x.shape, blocks, y)


def maxpool2_backward(gy, cache):
    shape, blocks, y = cache
    n, h2, _, w2, _, c = blocks.shape
    mask = blocks == y[:, :, None, :, None, :]
    # route to the first max only
    flat = mask.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    first = np.zeros_like(flat)
    idx = flat.argmax(axis=-1)
    np.put_along_axis(first, idx[..., None], True, axis=-1)
    route = first.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    gx = np.zeros(shape, dtype=gy.dtype)
    gx[:, : 2 * h2, : 2 * w2] = (route * gy[:, :, None, :, None, :]).reshape(n, 2 * h2, 2 * w2, c)
    return gx


def l1_loss(pred, target):
    """Mean absolute error and its gradient ``sign(pred - target) / N``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    loss = float(np.abs(diff).mean()) if diff.size else 0.0
    grad = (np.sign(diff) / max(diff.size, 1)).astype(pred.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def forward(spec: NetworkSpec, params: ParamStore, x):
    """Run the chain; returns ``(output, caches)``."""
    caches = []
    for layer, view in zip(spec.layers, params.views):
        if layer.kind == Kind.CONV:
            x, cache = conv_forward(x, view[0], view[1], layer.stride)
        elif layer.kind == Kind.RELU:
            x, cache = relu_forward(x)
        elif layer.kind == Kind.DENSE:
            x, cache = dense_forward(x, view[0], view[1])
        else:
            x, cache = maxpool2_forward(x)
        caches.append(cache)
    return x, caches


def predict(spec: NetworkSpec, params: ParamStore, x, batch_size: int = 512):
    """Forward pass in chunks without keeping caches."""
    outs = []
    for i in range(0, len(x), batch_size):
        y, _ = forward(spec, params, x[i : i + batch_size])
        outs.append(y)
    if not outs:
        return np.zeros((0,) + spec.output_shape(x.shape[1:]), dtype=params.dtype)
    return np.concatenate(outs)


def backward(spec: NetworkSpec, params: ParamStore, caches, gy) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector."""
    grad = ParamStore(spec, np.zeros_like(params.flat))
    n = len(spec.layers)
    for pos, layer, cache, gview in zip(range(n - 1, -1, -1), reversed(spec.layers), reversed(caches), reversed(grad.views)):
        if layer.kind == Kind.CONV:
            gy, gw, gb = conv_backward(gy, cache, need_input_grad=pos > 0)
        elif layer.kind == Kind.RELU:
            gy = relu_backward(gy, cache)
            continue
        elif layer.kind == Kind.DENSE:
            gy, gw, gb = dense_backward(gy, cache)
        else:
            gy = maxpool2_backward(gy, cache)
            continue
        gview[0][...] = gw
        gview[1][...] = gb
    return grad.flat


def loss_and_grad(spec: NetworkSpec, params: ParamStore, x, target):
    y, caches = forward(spec, params, x)
    loss, gy = l1_loss(y, target)
    return loss, backward(spec, params, caches, gy)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Bias-corrected Adam with float64 moment accumulators."""

    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Update ``theta`` in place and return it."""
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient; optimizer step aborted")
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * np.square(grad, dtype=np.float64)
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        theta -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(theta.dtype)
        return theta


# ---------------------------------------------------------------------------
# NNWT weights
# ---------------------------------------------------------------------------

_HEAD = struct.Struct("<4sII")
_LAYER = struct.Struct("<B4I")


def nnwt_size(spec: NetworkSpec) -> int:
    return _HEAD.size + _LAYER.size * len(spec.layers) + 4 * spec.param_count + 4


def save_weights(path, spec: NetworkSpec, params: ParamStore) -> None:
    parts = [_HEAD.pack(NNWT_MAGIC, NNWT_VERSION, len(spec.layers))]
    for layer, view in zip(spec.layers, params.views):
        parts.append(_LAYER.pack(int(layer.kind), *layer.dims()))
        if view is not None:
            parts.append(np.ascontiguousarray(view[0], dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(view[1], dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", crc32(body)))


def load_weights(path) -> tuple[NetworkSpec, ParamStore]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size + 4:
        raise WeightsError(f"{path}: truncated weights file")
    magic, version, n_layers = _HEAD.unpack_from(blob)
    if magic != NNWT_MAGIC:
        raise WeightsError(f"{path}: bad magic {magic!r}")
    if version != NNWT_VERSION:
        raise WeightsError(f"{path}: unsupported version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    off = _HEAD.size
    layers, chunks = [], []
    for _ in range(n_layers):
        if off + _LAYER.size > len(body):
            raise WeightsError(f"{path}: truncated layer table")
        tag, *dims = _LAYER.unpack_from(body, off)
        off += _LAYER.size
        try:
            layer = LayerSpec.from_dims(tag, dims)
        except ValueError as exc:
            raise WeightsError(f"{path}: unknown layer tag {tag}") from exc
        n = layer.param_count
        if off + 4 * n > len(body):
            raise WeightsError(f"{path}: truncated parameter payload")
        chunks.append(np.frombuffer(body, dtype="<f4", count=n, offset=off))
        off += 4 * n
        layers.append(layer)
    if off != len(body):
        raise WeightsError(f"{path}: {len(body) - off} trailing bytes before checksum")
    if crc32(body) != crc:
        raise WeightsError(f"{path}: checksum mismatch")
    spec = NetworkSpec(tuple(layers))
    flat = np.concatenate(chunks).astype(np.float32) if chunks else np.zeros(0, np.float32)
    return spec, ParamStore(spec, flat)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst_index: int


def _kink_signature(spec, caches):
    sig = []
    for layer, cache in zip(spec.layers, caches):
        if layer.kind == Kind.RELU:
            sig.append(cache > 0)
        elif layer.kind == Kind.MAXPOOL2:
            _, blocks, y = cache
            sig.append(blocks == y[:, :, None, :, None, :])
    return sig


def gradcheck(
    spec: NetworkSpec,
    seed: int = 0,
    batch: int = 2,
    n_params: int = 200,
    h: float = 1e-4,
    input_shape: tuple[int, ...] | None = None,
) -> GradcheckReport:
    """Compare backprop against central differences of the L1 loss (float64).

    Parameters whose +-h perturbation flips a ReLU or max-pool decision are
    non-differentiable there and are replaced by fresh draws.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed, dtype=np.float64)
    # nonzero biases so ReLU boundaries are not aligned with zero inputs
    for view in params.views:
        if view is not None:
            view[1][...] = rng.normal(0.0, 0.1, size=view[1].shape)
    first = spec.layers[0]
    if input_shape is None:
        input_shape = (32, 32, first.in_ch) if first.kind == Kind.CONV else (first.in_ch,)
    x = rng.uniform(0.0, 1.0, size=(batch,) + tuple(input_shape))
    y0, caches = forward(spec, params, x)
    # keep targets away from predictions so the L1 kink is never crossed
    target = y0 + rng.choice([-1.0, 1.0], size=y0.shape) * rng.uniform(0.5, 1.5, size=y0.shape)
    _, gy = l1_loss(y0, target)
    analytic = backward(spec, params, caches, gy)
    base_sig = _kink_signature(spec, caches)

    def loss_at(theta_i, i):
        old = params.flat[i]
        params.flat[i] = theta_i
        y, c = forward(spec, params, x)
        params.flat[i] = old
        return l1_loss(y, target)[0], _kink_signature(spec, c)

    worst, worst_i, checked, skipped = 0.0, -1, 0, 0
    order = rng.permutation(spec.param_count)
    for i in order:
        if checked >= n_params:
            break
        lp, sp = loss_at(params.flat[i] + h, i)
        lm, sm = loss_at(params.flat[i] - h, i)
        if any(not np.array_equal(a, b) for a, b in zip(sp + sm, base_sig + base_sig)):
            skipped += 1
            continue
        numeric = (lp - lm) / (2 * h)
        a = analytic[i]
        denom = max(abs(a), abs(numeric))
        err = 0.0 if denom < 1e-10 else abs(a - numeric) / denom
        checked += 1
        if err > worst:
            worst, worst_i = err, int(i)
    return GradcheckReport(worst, checked, skipped, worst_i)
