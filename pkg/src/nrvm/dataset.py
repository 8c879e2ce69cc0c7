"""Training-corpus construction: labeled patch pools, balancing, strategy mixes, manifests."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import kernels
from .imaging import PATCH, Image, PatchRect, as_array, crc32, enumerate_patches, extract_patches
from .metrics import MetricKind, Normalizer, metric_map, percentile

DEFAULT_EPSILON = 0.01
DEFAULT_STRIDE = 16
PATCH_FLOATS = PATCH * PATCH * 3


class PatchClass(str, Enum):
    NATURAL = "natural"
    DISTORTED = "distorted"


class Strategy(str, Enum):
    FULL = "full"
    NOBALANCE = "nobalance"
    NONATURAL = "nonatural"


class DataError(ValueError):
    """Input data cannot satisfy the request (empty pools, corrupt files...)."""


@dataclass(frozen=True)
class PatchRecord:
    source_id: str
    rect: PatchRect
    cls: PatchClass
    response: float

    def __post_init__(self):
        if not (np.isfinite(self.response) and self.response >= 0):
            raise ValueError(f"patch response must be finite and >= 0, got {self.response}")
        if self.cls == PatchClass.NATURAL and self.response != 0:
            raise ValueError("natural patches carry a zero response")


@dataclass
class LabeledPool:
    """Records plus the images their rects point into."""

    records: list[PatchRecord]
    sources: dict[str, np.ndarray]
    p95: float | None = None

    def __len__(self):
        return len(self.records)

    def responses(self) -> np.ndarray:
        return np.array([r.response for r in self.records], dtype=np.float64)

    def pixels(self, records) -> np.ndarray:
        out = np.empty((len(records), PATCH, PATCH, 3), dtype=np.float32)
        for i, r in enumerate(records):
            out[i] = _rgb(self.sources[r.source_id])[r.rect.slices()]
        return out


def _rgb(a: np.ndarray) -> np.ndarray:
    return np.repeat(a, 3, axis=2) if a.shape[2] == 1 else a


@dataclass(frozen=True)
class BalanceConfig:
    target_count: int
    epsilon: float = DEFAULT_EPSILON
    p95: Normalizer | None = None
    seed: int = 0

    def __post_init__(self):
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class Selection:
    records: list[PatchRecord]
    underfilled: bool
    draws: int = 0

    def __len__(self):
        return len(self.records)


@dataclass
class DatasetManifest:
    metric: MetricKind
    p95: float
    seed: int
    strategy: Strategy | None
    records: list[PatchRecord]
    patches: np.ndarray  # (N, 32, 32, 3) float32
    underfilled: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.records) != len(self.patches):
            raise ValueError("record count and payload patch count differ")

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.response for r in self.records], dtype=np.float32)

    @property
    def classes(self) -> np.ndarray:
        return np.array([r.cls == PatchClass.NATURAL for r in self.records], dtype=bool)

    def subset(self, idx) -> "DatasetManifest":
        idx = np.asarray(idx, dtype=int)
        return replace(self, records=[self.records[i] for i in idx], patches=self.patches[idx])

    def concat(self, other: "DatasetManifest") -> "DatasetManifest":
        return replace(self, records=self.records + other.records, patches=np.concatenate([self.patches, other.patches]))


def _f32(x: float) -> float:
    return float(np.float32(x))


# ---------------------------------------------------------------------------
# labeling
# ---------------------------------------------------------------------------


def label_distorted(
    pairs,
    metric: MetricKind | str = MetricKind.MSE,
    stride: int = DEFAULT_STRIDE,
    p95: float | None = None,
    net=None,
    ids: list[str] | None = None,
) -> LabeledPool:
    """One record per sliding window of each (distorted, reference) pair.

    ``pairs`` may be any iterable (e.g. a generator); only the distorted
    images are retained, as float32, for later pixel extraction.

    Labels are window means of the metric map divided by ``p95``; when ``p95``
    is None it is the 95th percentile of this pool's raw window means.
    """
    raw, sources = [], {}
    for k, (a, b) in enumerate(pairs):
        sid = ids[k] if ids is not None else f"d{k:05d}"
        a_arr = as_array(a)
        m = metric_map(metric, a, b, net=net).data.astype(np.float64)
        rects = enumerate_patches(a_arr, stride)
        # window means from an integral image
        ii = np.zeros((m.shape[0] + 1, m.shape[1] + 1))
        ii[1:, 1:] = m.cumsum(0).cumsum(1)
        for r in rects:
            y0, x0 = r.y, r.x
            s = ii[y0 + PATCH, x0 + PATCH] - ii[y0, x0 + PATCH] - ii[y0 + PATCH, x0] + ii[y0, x0]
            raw.append((sid, r, max(s / (PATCH * PATCH), 0.0)))
        sources[sid] = a_arr.astype(np.float32)
    if not sources:
        raise DataError("no image pairs to label")
    if p95 is None:
        p95 = percentile([v for _, _, v in raw], 0.95)
        if not p95 > 0:
            raise DataError("distorted pool has a zero 95th percentile; nothing to learn")
    Normalizer(p95)
    records = [PatchRecord(sid, r, PatchClass.DISTORTED, _f32(v / p95)) for sid, r, v in raw]
    return LabeledPool(records, sources, float(p95))


def label_natural(images, stride: int = DEFAULT_STRIDE, count: int | None = None, seed: int = 0, ids=None) -> LabeledPool:
    """``count`` windows drawn without replacement from all windows; all labels 0."""
    images = [as_array(im).astype(np.float32) for im in images]
    if not images:
        raise DataError("no natural images")
    ids = ids or [f"n{i:05d}" for i in range(len(images))]
    every = [(sid, r) for sid, im in zip(ids, images) for r in enumerate_patches(im, stride)]
    if count is None:
        count = len(every)
    if count > len(every):
        raise DataError(f"requested {count} natural patches but only {len(every)} windows exist")
    rng = np.random.default_rng([seed, 1])
    pick = rng.choice(len(every), size=count, replace=False) if count < len(every) else np.arange(len(every))
    records = [PatchRecord(every[i][0], every[i][1], PatchClass.NATURAL, 0.0) for i in pick]
    return LabeledPool(records, dict(zip(ids, images)))


# ---------------------------------------------------------------------------
# balancing
# ---------------------------------------------------------------------------


def balance_sample(pool, cfg: BalanceConfig, chunk: int = 4096) -> Selection:
    """Select records so their responses spread uniformly over [0, 1].

    Each draw xi ~ U[0, 1] takes the remaining record whose response is
    closest to xi, unless that distance exceeds ``cfg.epsilon`` (rejection).
    Stops at ``cfg.target_count`` or after ``10 * target_count`` consecutive
    rejections.
    """
    records = pool.records if isinstance(pool, LabeledPool) else list(pool)
    if not records:
        raise DataError("empty pool")
    resp = np.array([r.response for r in records], dtype=np.float64)
    order = np.argsort(resp, kind="stable")
    d = np.ascontiguousarray(resp[order])
    n = d.size
    # union-find parents over shifted indices; slots 0 and n+1 are sentinels
    nxt = np.arange(n + 2, dtype=np.int64)
    prv = np.arange(n + 2, dtype=np.int64)
    target = min(cfg.target_count, n)
    out = np.empty(target, dtype=np.int64)
    max_rejects = 10 * cfg.target_count
    rng = np.random.default_rng([cfg.seed, 2])
    n_sel, rejects, draws = 0, 0, 0
    while n_sel < target and rejects < max_rejects:
        xi = rng.uniform(0.0, 1.0, size=chunk)
        n_sel, rejects, used = kernels.balance_draws(d, xi, cfg.epsilon, nxt, prv, out, n_sel, target, rejects, max_rejects)
        draws += used
    picked = [records[order[i]] for i in out[:n_sel]]
    return Selection(picked, n_sel < cfg.target_count, draws)


def uniform_sample(records, count: int, seed: int) -> list[PatchRecord]:
    if count > len(records):
        raise DataError(f"requested {count} records from a pool of {len(records)}")
    rng = np.random.default_rng([seed, 3])
    return [records[i] for i in rng.choice(len(records), size=count, replace=False)]


def build_training_set(
    distorted: LabeledPool,
    natural: LabeledPool | None,
    strategy: Strategy | str,
    cfg: BalanceConfig,
    metric: MetricKind | str = MetricKind.MSE,
) -> DatasetManifest:
    strategy = Strategy(strategy)
    if not len(distorted):
        raise DataError("empty distorted pool")
    t = cfg.target_count
    nat: list[PatchRecord] = []
    if strategy == Strategy.NONATURAL:
        sel = balance_sample(distorted, replace(cfg, target_count=2 * t))
        dist, under = sel.records, sel.underfilled
    else:
        if natural is None or len(natural) < t:
            have = 0 if natural is None else len(natural)
            raise DataError(f"strategy {strategy.value} needs {t} natural patches, pool has {have}")
        nat = uniform_sample(natural.records, t, cfg.seed)
        if strategy == Strategy.FULL:
            sel = balance_sample(distorted, cfg)
            dist, under = sel.records, sel.underfilled
        else:
            if len(distorted) < t:
                raise DataError(f"need {t} distorted patches, pool has {len(distorted)}")
            dist, under = uniform_sample(distorted.records, t, cfg.seed), False
    patches = np.concatenate([distorted.pixels(dist), natural.pixels(nat) if nat else np.zeros((0, PATCH, PATCH, 3), np.float32)])
    records = [replace(r, response=_f32(r.response)) for r in dist + nat]
    return DatasetManifest(MetricKind(metric), float(distorted.p95), cfg.seed, strategy, records, patches, under)


def build_test_set(
    distorted: LabeledPool,
    natural: LabeledPool,
    metric: MetricKind | str = MetricKind.MSE,
    seed: int = 0,
    count: int | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> DatasetManifest:
    """Held-out manifest with the same mix as FULL training data.

    With ``count`` set: ``count`` balanced distorted patches plus ``count``
    natural ones. Without it every record of both pools is used.
    """
    if count is None:
        dist, nat = distorted.records, natural.records
    else:
        dist = balance_sample(distorted, BalanceConfig(count, epsilon, seed=seed)).records
        nat = uniform_sample(natural.records, min(count, len(natural)), seed)
    patches = np.concatenate([distorted.pixels(dist), natural.pixels(nat)])
    records = [replace(r, response=_f32(r.response)) for r in dist + nat]
    return DatasetManifest(MetricKind(metric), float(distorted.p95), seed, None, records, patches)


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------


def write_manifest(m: DatasetManifest, path) -> Path:
    """Write ``path`` (JSON index) and its ``.bin`` payload; returns the payload path."""
    path = Path(path)
    payload = path.with_suffix(".bin")
    labels = m.labels
    rows = np.empty((len(m), PATCH_FLOATS + 1), dtype="<f4")
    rows[:, :PATCH_FLOATS] = m.patches.reshape(len(m), -1)
    rows[:, PATCH_FLOATS] = labels
    data = rows.tobytes()
    payload.write_bytes(data + struct.pack("<I", crc32(data)))
    doc = {
        "metric": m.metric.value,
        "p95": m.p95,
        "seed": m.seed,
        "strategy": m.strategy.value if m.strategy else None,
        "underfilled": m.underfilled,
        "patches": [
            {"src": r.source_id, "x": r.rect.x, "y": r.rect.y, "class": r.cls.value, "label": float(lab)}
            for r, lab in zip(m.records, labels)
        ],
        "payload": payload.name,
    }
    if m.extra:
        doc["extra"] = m.extra
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return payload


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable manifest ({exc})") from exc
    blob = (path.parent / doc["payload"]).read_bytes()
    n = len(doc["patches"])
    row = 4 * (PATCH_FLOATS + 1)
    if len(blob) != n * row + 4:
        raise DataError(f"{path}: payload holds {len(blob)} bytes, expected {n * row + 4}")
    data, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if crc32(data) != crc:
        raise DataError(f"{path}: payload checksum mismatch")
    rows = np.frombuffer(data, dtype="<f4").reshape(n, PATCH_FLOATS + 1)
    patches = rows[:, :PATCH_FLOATS].reshape(n, PATCH, PATCH, 3).astype(np.float32)
    records = []
    for p, lab in zip(doc["patches"], rows[:, PATCH_FLOATS]):
        if np.float32(p["label"]) != lab:
            raise DataError(f"{path}: label mismatch between index and payload")
        records.append(PatchRecord(p["src"], PatchRect(p["x"], p["y"]), PatchClass(p["class"]), float(lab)))
    strategy = Strategy(doc["strategy"]) if doc.get("strategy") else None
    return DatasetManifest(
        MetricKind(doc["metric"]), float(doc["p95"]), int(doc["seed"]), strategy, records, patches,
        bool(doc.get("underfilled", False)), doc.get("extra", {}),
    )
