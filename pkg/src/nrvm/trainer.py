"""Mini-batch training on patch manifests and sliding-window map inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels, nn
from .dataset import DataError, DatasetManifest
from .imaging import PATCH, ResponseMap, as_array
from .metrics import MetricKind, Normalizer

log = logging.getLogger(__name__)

DEFAULT_MAP_STRIDE = 8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.5
    decay_every: int | None = 10
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        if not self.decay_every:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class PredictorHandle:
    spec: nn.NetworkSpec
    params: nn.ParamStore
    normalizer: Normalizer
    metric: MetricKind = MetricKind.MSE

    def save(self, path) -> None:
        path = Path(path)
        nn.save_weights(path, self.spec, self.params)
        meta = {"metric": self.metric.value, "p95": self.normalizer.p95}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PredictorHandle":
        path = Path(path)
        spec, params = nn.load_weights(path)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {"metric": "mse", "p95": 1.0}
        return cls(spec, params, Normalizer(float(meta["p95"])), MetricKind(meta["metric"]))


@dataclass
class TrainResult:
    handle: PredictorHandle
    losses: list[float] = field(default_factory=list)
    val_losses: list[float | None] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def write_log(self, path) -> None:
        lines = [f"{i},{loss!r},{lr!r}" for i, (loss, lr) in enumerate(zip(self.losses, self.lrs))]
        Path(path).write_text("\n".join(lines) + "\n")


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig | None = None,
    spec: nn.NetworkSpec | None = None,
    init: nn.ParamStore | None = None,
) -> TrainResult:
    """Minimise the L1 error between predicted and labelled patch responses."""
    cfg = cfg or TrainConfig()
    if len(manifest) == 0:
        raise DataError("cannot train on an empty manifest")
    spec = spec or nn.default_architecture()
    params = init.copy() if init is not None else nn.init_params(spec, cfg.seed)
    x_all = manifest.patches
    y_all = manifest.labels[:, None]

    rng = np.random.default_rng([cfg.seed, 4])
    perm = rng.permutation(len(manifest))
    n_val = int(cfg.val_fraction * len(manifest))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise DataError("validation split leaves no training patches")

    opt = nn.Adam(params.flat.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(PredictorHandle(spec, params, Normalizer(manifest.p95), manifest.metric))
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = np.sort(order[start : start + cfg.batch_size])
            loss, grad = nn.loss_and_grad(spec, params, x_all[idx], y_all[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.step(params.flat, grad)
            total += loss * idx.size
            seen += idx.size
        result.losses.append(total / seen)
        result.lrs.append(opt.lr)
        if n_val:
            pred = nn.predict(spec, params, x_all[val_idx])
            result.val_losses.append(float(np.abs(pred.astype(np.float64) - y_all[val_idx]).mean()))
        else:
            result.val_losses.append(None)
        log.info("epoch %d loss %.5f val %s lr %.2e", epoch, result.losses[-1], result.val_losses[-1], opt.lr)
    return result


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict_patches(h: PredictorHandle, patches: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Normalized responses for an (N, 32, 32, 3) stack, clamped below at 0."""
    patches = np.asarray(patches, dtype=h.params.dtype)
    if patches.ndim != 4 or patches.shape[1:] != (PATCH, PATCH, 3):
        raise ValueError(f"expected (N, {PATCH}, {PATCH}, 3) patches, got {patches.shape}")
    out = nn.predict(h.spec, h.params, patches, batch_size)
    return np.maximum(out.reshape(len(patches)).astype(np.float64), 0.0)


def predict_patch(h: PredictorHandle, patch) -> float:
    p = as_array(patch)
    if p.shape != (PATCH, PATCH, 3):
        raise ValueError(f"expected a {PATCH}x{PATCH}x3 patch, got {p.shape}")
    return float(predict_patches(h, p[None])[0])


def window_values(h: PredictorHandle, img, stride: int) -> np.ndarray:
    a = as_array(img)
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    win = sliding_window_view(a, (PATCH, PATCH), axis=(0, 1))[::stride, ::stride]
    ny, nx = win.shape[:2]
    patches = win.transpose(0, 1, 3, 4, 2).reshape(ny * nx, PATCH, PATCH, 3)
    return predict_patches(h, patches).reshape(ny, nx)


def assemble_map(values: np.ndarray, height: int, width: int, stride: int) -> np.ndarray:
    """Average window scalars over covered pixels; uncovered borders copy the nearest covered pixel."""
    acc, cnt = kernels.accumulate_windows(np.ascontiguousarray(values, dtype=np.float64), height, width, stride, PATCH)
    ny, nx = values.shape
    ch, cw = (ny - 1) * stride + PATCH, (nx - 1) * stride + PATCH
    out = acc[:ch, :cw] / cnt[:ch, :cw]
    yi = np.minimum(np.arange(height), ch - 1)
    xi = np.minimum(np.arange(width), cw - 1)
    return out[yi[:, None], xi[None, :]]


def predict_map(h: PredictorHandle, img, stride: int = DEFAULT_MAP_STRIDE) -> ResponseMap:
    a = as_array(img)
    if a.shape[0] < PATCH or a.shape[1] < PATCH:
        raise ValueError(f"image must be at least {PATCH}x{PATCH}")
    if not 1 <= stride <= PATCH:
        raise ValueError(f"stride must lie in [1, {PATCH}]")
    vals = window_values(h, a, stride)
    return ResponseMap(assemble_map(vals, a.shape[0], a.shape[1], stride))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
