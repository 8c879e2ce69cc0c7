"""Adaptive light-field capture: grid subdivision driven by a per-view error scorer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .dibr import Layer, SyntheticScene, View, ViewPosition, corrupt_disparity, procedural_texture, render_view, synthesize_view
from .metrics import MetricKind, metric_map
from .trainer import DEFAULT_MAP_STRIDE, PredictorHandle, predict_map

Index = tuple[int, int]
Cell = tuple[int, int, int, int]  # r0, c0, r1, c1 (inclusive corners)


class ScorerKind(str, Enum):
    ORACLE = "oracle"
    LEARNED = "learned"


@dataclass(frozen=True)
class Scorer:
    """ORACLE compares against the true view; LEARNED sees the rendering alone."""

    kind: ScorerKind
    metric: MetricKind = MetricKind.MSE
    handle: PredictorHandle | None = None
    stride: int = DEFAULT_MAP_STRIDE
    net: object = None

    @classmethod
    def oracle(cls, metric: MetricKind | str = MetricKind.MSE, net=None) -> "Scorer":
        return cls(ScorerKind.ORACLE, MetricKind(metric), net=net)

    @classmethod
    def learned(cls, handle: PredictorHandle, stride: int = DEFAULT_MAP_STRIDE) -> "Scorer":
        return cls(ScorerKind.LEARNED, handle.metric, handle, stride)


def score_view(rendered, scorer: Scorer, reference=None) -> float:
    """Mean over all pixels of the scorer's map, in raw metric units.

    The learned map is p95-normalized, so it is scaled back by the handle's p95
    to be comparable with oracle scores and thresholds.
    """
    if scorer.kind == ScorerKind.ORACLE:
        if reference is None:
            raise ValueError("the oracle scorer needs the reference view")
        return metric_map(scorer.metric, rendered, reference, net=scorer.net).mean()
    if reference is not None:
        raise ValueError("the learned scorer must not see the reference view")
    if scorer.handle is None:
        raise ValueError("learned scorer without a predictor")
    return predict_map(scorer.handle, rendered, scorer.stride).mean() * scorer.handle.normalizer.p95


@dataclass
class LightField:
    """Dense ground truth: ``views[r][c]`` sits at position (u=c*spacing, v=r*spacing)."""

    views: list[list[View]]

    @property
    def rows(self) -> int:
        return len(self.views)

    @property
    def cols(self) -> int:
        return len(self.views[0])

    def __getitem__(self, rc: Index) -> View:
        return self.views[rc[0]][rc[1]]

    @classmethod
    def from_scene(cls, scene: SyntheticScene, rows: int, cols: int, spacing: float = 1.0) -> "LightField":
        return cls([[render_view(scene, ViewPosition(c * spacing, r * spacing)) for c in range(cols)] for r in range(rows)])


@dataclass(frozen=True)
class SimConfig:
    threshold: float
    scorer: Scorer
    time_per_capture: float = 1.0
    max_iterations: int | None = None
    # disparity estimation error applied to captured views (0 = exact)
    corrupt_strength: float = 0.0
    corrupt_radius: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.threshold >= 0 or math.isnan(self.threshold):
            raise ValueError("threshold must be >= 0")
        if not self.time_per_capture > 0:
            raise ValueError("time_per_capture must be > 0")


@dataclass
class CaptureReport:
    captured: list[Index]
    dense: int
    iterations: int
    time: float
    final_error: np.ndarray | None  # (rows, cols) true error of each view as finally rendered; 0 when captured
    trace: list[dict] = field(default_factory=list)

    @property
    def sparsity(self) -> float:
        return len(self.captured) / self.dense

    def to_json(self) -> dict:
        return {
            "captured": [list(rc) for rc in self.captured],
            "n_captured": len(self.captured),
            "dense": self.dense,
            "sparsity": self.sparsity,
            "iterations": self.iterations,
            "time": self.time,
            "final_error": None if self.final_error is None else self.final_error.tolist(),
            "trace": self.trace,
        }


def _corners(cell: Cell) -> list[Index]:
    r0, c0, r1, c1 = cell
    return list(dict.fromkeys([(r0, c0), (r0, c1), (r1, c0), (r1, c1)]))


def _members(cell: Cell) -> list[Index]:
    r0, c0, r1, c1 = cell
    return [(r, c) for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]


def _split(cell: Cell) -> tuple[list[Index], list[Cell]]:
    """Quad-split (or halve along the one long side); midpoints round down."""
    r0, c0, r1, c1 = cell
    rs = [r0, (r0 + r1) // 2, r1] if r1 - r0 >= 2 else [r0, r1]
    cs = [c0, (c0 + c1) // 2, c1] if c1 - c0 >= 2 else [c0, c1]
    rs, cs = list(dict.fromkeys(rs)), list(dict.fromkeys(cs))
    new = [(r, c) for r in rs for c in cs if (r in (r0, r1)) + (c in (c0, c1)) < 2]
    subs = [(rs[i], cs[j], rs[i + 1] if len(rs) > 1 else rs[i], cs[j + 1] if len(cs) > 1 else cs[j])
            for i in range(max(len(rs) - 1, 1)) for j in range(max(len(cs) - 1, 1))]
    return new, subs


class _Renderer:
    """Synthesizes views from captured corners, with per-view disparity estimates fixed by seed."""

    def __init__(self, lf: LightField, cfg: SimConfig):
        self.lf, self.cfg = lf, cfg
        self._disp: dict[Index, np.ndarray] = {}

    def source(self, rc: Index) -> View:
        v = self.lf[rc]
        if self.cfg.corrupt_strength <= 0:
            return v
        if rc not in self._disp:
            rng = np.random.default_rng([self.cfg.seed, rc[0], rc[1], 13])
            self._disp[rc] = corrupt_disparity(v.disparity, rng, self.cfg.corrupt_radius, self.cfg.corrupt_strength)
        return View(v.image, self._disp[rc], v.position)

    def synthesize(self, cell: Cell, rc: Index):
        return synthesize_view([self.source(k) for k in _corners(cell)], self.lf[rc].position)


def _check_grid(lf: LightField) -> None:
    if lf.rows < 1 or lf.cols < 1 or lf.rows * lf.cols < 2 or (lf.rows > 1 and lf.cols < 2):
        raise ValueError(f"grid {lf.rows}x{lf.cols} is smaller than 2x2 (or 1x2)")


def run_adaptive(lf: LightField, cfg: SimConfig) -> CaptureReport:
    """Capture corners, then keep splitting cells whose mean view score exceeds the threshold."""
    _check_grid(lf)
    render = _Renderer(lf, cfg)
    root: Cell = (0, 0, lf.rows - 1, lf.cols - 1)
    captured: dict[Index, None] = dict.fromkeys(_corners(root))
    active = [root]
    leaves: list[Cell] = []
    trace = [{"iteration": 0, "cells": [], "new_captures": [list(rc) for rc in captured]}]
    iterations = 0
    while active and (cfg.max_iterations is None or iterations < cfg.max_iterations):
        iterations += 1
        step = {"iteration": iterations, "cells": [], "new_captures": []}
        nxt: list[Cell] = []
        for cell in active:
            todo = [rc for rc in _members(cell) if rc not in captured]
            if not todo:
                continue
            scores = {}
            for rc in todo:
                img = render.synthesize(cell, rc)
                ref = lf[rc].image if cfg.scorer.kind == ScorerKind.ORACLE else None
                scores[rc] = score_view(img, cfg.scorer, ref)
            mean = float(np.mean(list(scores.values())))
            step["cells"].append(
                {"cell": list(cell), "score": mean, "views": [[r, c, s] for (r, c), s in scores.items()]}
            )
            if mean <= cfg.threshold:
                leaves.append(cell)
                continue
            new, subs = _split(cell)
            for rc in new:
                if rc not in captured:
                    captured[rc] = None
                    step["new_captures"].append(list(rc))
            nxt.extend(subs)
        trace.append(step)
        active = nxt
    leaves.extend(active)  # cut off by max_iterations
    final = _final_errors(lf, render, leaves, captured, cfg)
    return CaptureReport(list(captured), lf.rows * lf.cols, iterations, len(captured) * cfg.time_per_capture, final, trace)


def _final_errors(lf: LightField, render: _Renderer, leaves: list[Cell], captured, cfg: SimConfig) -> np.ndarray:
    """True error of every uncaptured view rendered from its final cell(s); worst cell wins."""
    metric = cfg.scorer.metric
    err = np.zeros((lf.rows, lf.cols))
    for cell in leaves:
        for rc in _members(cell):
            if rc in captured:
                continue
            e = metric_map(metric, render.synthesize(cell, rc), lf[rc].image, net=cfg.scorer.net).mean()
            err[rc] = max(err[rc], e)
    return err


def iteration_bound(rows: int, cols: int) -> int:
    return math.ceil(math.log2(max(rows, cols))) + 1


# ---------------------------------------------------------------------------
# scorer agreement
# ---------------------------------------------------------------------------


@dataclass
class ScorerAgreement:
    oracle_scores: list[float]
    learned_scores: list[float]
    r: float
    jaccard: float
    oracle: CaptureReport
    learned: CaptureReport

    def to_json(self) -> dict:
        return {
            "r": self.r,
            "jaccard": self.jaccard,
            "scatter": [[a, b] for a, b in zip(self.oracle_scores, self.learned_scores)],
            "oracle_sparsity": self.oracle.sparsity,
            "learned_sparsity": self.learned.sparsity,
        }


def jaccard(a, b) -> float:
    a, b = set(map(tuple, a)), set(map(tuple, b))
    return len(a & b) / len(a | b) if a | b else 1.0


def compare_scorers(lf: LightField, cfg_oracle: SimConfig, cfg_learned: SimConfig) -> ScorerAgreement:
    """Run both scorers; re-score every view the oracle run rendered with the learned scorer."""
    from .evaluation import pearson_r

    ro = run_adaptive(lf, cfg_oracle)
    rl = run_adaptive(lf, cfg_learned)
    render = _Renderer(lf, cfg_oracle)
    xs, ys = [], []
    for step in ro.trace:
        for entry in step["cells"]:
            cell = tuple(entry["cell"])
            for r, c, s in entry["views"]:
                img = render.synthesize(cell, (r, c))
                xs.append(float(s))
                if cfg_learned.scorer.kind == ScorerKind.ORACLE:
                    ys.append(score_view(img, cfg_learned.scorer, lf[r, c].image))
                else:
                    ys.append(score_view(img, cfg_learned.scorer))
    try:
        r = pearson_r(xs, ys)
    except ValueError:
        r = 1.0 if np.allclose(xs, ys) else 0.0
    return ScorerAgreement(xs, ys, r, jaccard(ro.captured, rl.captured), ro, rl)


# ---------------------------------------------------------------------------
# demo scenes
# ---------------------------------------------------------------------------


def demo_scene(width: int = 128, height: int = 96, seed: int = 7, n_occluders: int = 6) -> SyntheticScene:
    """Textured backdrop plus a layer of box occluders one disparity step in front."""
    rng = np.random.default_rng([seed, 20])
    margin = 40
    bg = procedural_texture(rng, height + 2 * margin, width + 2 * margin, "blobs")
    fg = procedural_texture(rng, height + 2 * margin, width + 2 * margin, "checker")
    mask = np.zeros(fg.shape[:2])
    for _ in range(n_occluders):
        y = int(rng.integers(margin, margin + height - 30))
        x = int(rng.integers(margin - 10, margin + width - 10))
        mask[y : y + int(rng.integers(12, 36)), x : x + int(rng.integers(6, 24))] = 1.0
    return SyntheticScene(
        (Layer(bg, 0.0, None, margin, margin), Layer(fg, 1.0, mask, margin, margin)), width, height, {"name": "demo"}
    )


def panoramic_scene(n_views: int = 180, width: int = 128, height: int = 64, seed: int = 8) -> SyntheticScene:
    """Wide backdrop with a few occluders, for a 1xN sweep (one texel per view step)."""
    rng = np.random.default_rng([seed, 21])
    tw = width + n_views + 16
    bg = procedural_texture(rng, height + 16, tw, "blobs")
    fg = procedural_texture(rng, height + 16, tw, "checker")
    mask = np.zeros(fg.shape[:2])
    for x in range(40, tw - 40, 90):
        mask[20:50, x : x + 24] = 1.0
    return SyntheticScene((Layer(bg, 0.0, None, 0, 8), Layer(fg, 1.0, mask, 0, 8)), width, height, {"name": "panorama"})


def write_trace(path, report: CaptureReport) -> None:
    Path(path).write_text(json.dumps(report.trace, indent=1, sort_keys=True))


def upscale_grid(grid: np.ndarray, cell_px: int = 16) -> np.ndarray:
    return np.repeat(np.repeat(np.asarray(grid, dtype=np.float64), cell_px, axis=0), cell_px, axis=1)
