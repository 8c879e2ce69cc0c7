"""Prediction-error protocol: partitions, curves, strategy comparison, correlation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .imaging import ResponseMap, as_array
from .metrics import MetricKind, Normalizer, metric_map, normalize
from .trainer import PredictorHandle, predict_map, predict_patches

RESPONSE_BINS = 50
RESPONSE_RANGE = (0.0, 1.5)


class Partition(str, Enum):
    ALL = "all"
    CLEAN = "clean"
    DISTORTED = "distorted"


def prediction_error(pred, gt, n: Normalizer | None = None):
    """``|pred - gt|`` on p95-normalized values (pass raw values together with ``n``)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if n is not None:
        pred, gt = pred / n.p95, gt / n.p95
    err = np.abs(pred - gt)
    return float(err) if err.ndim == 0 else err


def fingerprint(m: DatasetManifest) -> str:
    h = hashlib.sha256()
    h.update(m.labels.tobytes())
    h.update(m.classes.tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    means: dict[str, float | None]
    counts: dict[str, int]
    sorted_error: list[float]
    response_curve: list[tuple[float, float | None]]
    test_fingerprint: str
    label: str = ""

    def mean(self, part: Partition | str) -> float | None:
        return self.means[Partition(part).value]

    def to_json(self) -> dict:
        return asdict(self)


def report_from_errors(errors, labels, natural, fp: str = "", label: str = "", curve_points: int = 200) -> EvalReport:
    errors = np.asarray(errors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    natural = np.asarray(natural, dtype=bool)
    parts = {Partition.ALL: np.ones_like(natural), Partition.CLEAN: natural, Partition.DISTORTED: ~natural}
    means, counts = {}, {}
    for p, mask in parts.items():
        counts[p.value] = int(mask.sum())
        means[p.value] = float(errors[mask].mean()) if mask.any() else None
    srt = np.sort(errors)
    if srt.size > curve_points:
        srt = srt[np.linspace(0, srt.size - 1, curve_points).round().astype(int)]
    edges = np.linspace(*RESPONSE_RANGE, RESPONSE_BINS + 1)
    which = np.clip(np.digitize(labels, edges) - 1, 0, RESPONSE_BINS - 1)
    inside = (labels >= RESPONSE_RANGE[0]) & (labels <= RESPONSE_RANGE[1])
    curve = []
    for k in range(RESPONSE_BINS):
        sel = inside & (which == k)
        centre = float(0.5 * (edges[k] + edges[k + 1]))
        curve.append((centre, float(errors[sel].mean()) if sel.any() else None))
    return EvalReport(means, counts, [float(v) for v in srt], curve, fp, label)


def evaluate(h: PredictorHandle, test: DatasetManifest, label: str = "") -> EvalReport:
    """Per-partition mean |prediction - label| on a labelled test manifest."""
    pred = predict_patches(h, test.patches)
    labels = test.labels.astype(np.float64)
    return report_from_errors(prediction_error(pred, labels), labels, test.classes, fingerprint(test), label)


@dataclass
class OrderingVerdict:
    full_best_all: bool
    nobalance_best_clean: bool
    nonatural_best_distorted: bool
    nobalance_beats_full_clean: bool
    nonatural_beats_full_distorted: bool

    @property
    def table_pattern(self) -> bool:
        """FULL wins ALL, NOBALANCE beats FULL on CLEAN, NONATURAL beats FULL on DISTORTED."""
        return self.full_best_all and self.nobalance_beats_full_clean and self.nonatural_beats_full_distorted


def _lt(a, b) -> bool:
    return a is not None and b is not None and a < b


def compare_strategies(full: EvalReport, nonatural: EvalReport, nobalance: EvalReport) -> OrderingVerdict:
    """Strict-ordering checks; ties and absent cells count as failures."""
    if not (full.test_fingerprint == nonatural.test_fingerprint == nobalance.test_fingerprint):
        raise ValueError("reports were computed on different test sets")
    a, c, d = Partition.ALL, Partition.CLEAN, Partition.DISTORTED
    return OrderingVerdict(
        full_best_all=_lt(full.mean(a), nonatural.mean(a)) and _lt(full.mean(a), nobalance.mean(a)),
        nobalance_best_clean=_lt(nobalance.mean(c), full.mean(c)) and _lt(nobalance.mean(c), nonatural.mean(c)),
        nonatural_best_distorted=_lt(nonatural.mean(d), full.mean(d)) and _lt(nonatural.mean(d), nobalance.mean(d)),
        nobalance_beats_full_clean=_lt(nobalance.mean(c), full.mean(c)),
        nonatural_beats_full_distorted=_lt(nonatural.mean(d), full.mean(d)),
    )


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson_r needs two equal-length samples of size >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(dx, dx)), np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson_r is undefined for zero variance")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class PerceptualFit:
    a: float
    b: float
    r: float

    def apply(self, pred):
        return self.a * np.asarray(pred, dtype=np.float64) + self.b


def fit_perceptualization(user, pred) -> PerceptualFit:
    """Least-squares ``user ~ a * pred + b`` over all pixels, plus Pearson r."""
    x = as_array(user).astype(np.float64).ravel()
    y = as_array(pred).astype(np.float64).ravel()
    if x.size != y.size:
        raise ValueError("user and prediction maps differ in size")
    dy = y - y.mean()
    vy = np.dot(dy, dy)
    if vy == 0:
        raise ValueError("prediction map has zero variance")
    a = float(np.dot(dy, x - x.mean()) / vy)
    b = float(x.mean() - a * y.mean())
    r = pearson_r(y, x) if np.ptp(x) > 0 else 0.0
    return PerceptualFit(a, b, r)


def leave_one_out_error(users, preds) -> float:
    """Mean absolute error of per-scene fits trained on the other scenes."""
    errs = []
    for k in range(len(users)):
        rest_u = np.concatenate([as_array(u).ravel() for i, u in enumerate(users) if i != k])
        rest_p = np.concatenate([as_array(p).ravel() for i, p in enumerate(preds) if i != k])
        fit = fit_perceptualization(rest_u, rest_p)
        errs.append(np.abs(fit.apply(as_array(preds[k])) - as_array(users[k])).mean())
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# misalignment
# ---------------------------------------------------------------------------


def shift_right(img, shift: int) -> np.ndarray:
    """Translate content ``shift`` px to the right, replicating the left edge."""
    a = as_array(img)
    if shift == 0:
        return a.copy()
    return np.concatenate([np.repeat(a[:, :1], shift, axis=1), a[:, :-shift]], axis=1)


@dataclass
class MisalignmentResult:
    fr_map: ResponseMap
    nr_map: ResponseMap
    fr_mean: float
    nr_mean: float


def misalignment_experiment(h: PredictorHandle, img, shift_px: int, stride: int = 8, net=None) -> MisalignmentResult:
    """FR response of an image against its shifted copy vs the NR prediction on the image."""
    a = as_array(img)
    if not 0 <= shift_px < a.shape[1]:
        raise ValueError(f"shift {shift_px} must lie in [0, width)")
    fr = normalize(metric_map(h.metric, a, shift_right(a, shift_px), net=net), h.normalizer)
    nr = predict_map(h, a, stride)
    return MisalignmentResult(fr, nr, fr.mean(), nr.mean())


def write_report(path, reports: dict[str, EvalReport], verdict: OrderingVerdict | None = None) -> None:
    doc = {"reports": {k: r.to_json() for k, r in reports.items()}}
    if verdict is not None:
        doc["verdicts"] = asdict(verdict) | {"table_pattern": verdict.table_pattern}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def write_curve_csv(path, points) -> None:
    lines = [f"{x!r},{y!r}" for x, y in points if y is not None]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_curve_csv(path) -> list[tuple[float, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            x, y = line.split(",")
            out.append((float(x), float(y)))
    return out


def table_rows(reports: dict[str, EvalReport]) -> list[str]:
    """Fixed-width rows: one per strategy, columns all / clean / distorted."""
    def cell(v):
        return "  n/a" if v is None else f"{v:.3f}"

    rows = [f"{'strategy':<10} {'all':>6} {'clean':>6} {'dist.':>6}"]
    for name, r in reports.items():
        rows.append(f"{name:<10} {cell(r.means['all']):>6} {cell(r.means['clean']):>6} {cell(r.means['distorted']):>6}")
    return rows


__all__ = [
    "EvalReport",
    "MetricKind",
    "OrderingVerdict",
    "Partition",
    "PerceptualFit",
    "compare_strategies",
    "evaluate",
    "fit_perceptualization",
    "misalignment_experiment",
    "pearson_r",
    "prediction_error",
]
