"""Synthetic light-field corpora: IBR (distorted, reference) pairs and clean natural images."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import LabeledPool, label_distorted, label_natural
from .dibr import (
    SyntheticScene,
    View,
    ViewPosition,
    corrupt_disparity,
    pan_scene,
    procedural_texture,
    random_layered_scene,
    render_view,
    synthesize_view,
)


@dataclass(frozen=True)
class CorpusConfig:
    n_scenes: int = 5
    lf_per_scene: int = 40
    view_size: int = 128
    world_size: int = 384
    n_layers: int = 3
    shapes_per_layer: int = 10
    max_disparity: int = 3
    baselines: tuple[float, ...] = (1.0, 1.5, 2.0)
    corrupt_radius: int = 2
    corrupt_strength: float = 1.0
    seed: int = 0


def make_scene(cfg: CorpusConfig, scene_seed: int) -> SyntheticScene:
    rng = np.random.default_rng([cfg.seed, scene_seed, 10])
    return random_layered_scene(
        rng,
        cfg.view_size,
        cfg.view_size,
        n_layers=cfg.n_layers,
        shapes_per_layer=cfg.shapes_per_layer,
        max_disparity=cfg.max_disparity,
        texture_size=(cfg.world_size, cfg.world_size),
    )


def lightfield_pairs(scene: SyntheticScene, baseline: float, rng: np.random.Generator, cfg: CorpusConfig):
    """Render a 3x3 grid, rebuild the five non-corner views from the corners.

    Corner disparities are corrupted at depth edges to imitate estimation
    failures. Returns a list of (distorted, reference) image arrays.
    """
    grid = [(r, c) for r in range(3) for c in range(3)]
    views = {rc: render_view(scene, ViewPosition(rc[1] * baseline, rc[0] * baseline)) for rc in grid}
    corners = []
    for rc in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        v = views[rc]
        d = corrupt_disparity(v.disparity, rng, cfg.corrupt_radius, cfg.corrupt_strength)
        corners.append(View(v.image, d, v.position))
    pairs = []
    for rc in grid:
        if rc[0] in (0, 2) and rc[1] in (0, 2):
            continue
        ref = views[rc]
        pairs.append((synthesize_view(corners, ref.position).data, ref.image.data))
    return pairs


def iter_ibr_pairs(cfg: CorpusConfig, scene_ids, scenes: dict | None = None):
    """Yield ``(id, (distorted, reference))`` for ``cfg.lf_per_scene`` light fields per scene.

    Scenes are generated from their id unless given in ``scenes`` (id -> scene);
    given scenes are not panned.
    """
    for s in scene_ids:
        if scenes is not None and s in scenes:
            scene, margin = scenes[s], 0
        else:
            scene, margin = make_scene(cfg, s), cfg.world_size - cfg.view_size - 2 * 12
        rng = np.random.default_rng([cfg.seed, s, 11])
        for k in range(cfg.lf_per_scene):
            dx = int(rng.integers(-margin // 2, margin // 2 + 1)) if margin > 0 else 0
            dy = int(rng.integers(-margin // 2, margin // 2 + 1)) if margin > 0 else 0
            panned = pan_scene(scene, dx, dy) if margin > 0 else scene
            b = cfg.baselines[k % len(cfg.baselines)]
            for j, pair in enumerate(lightfield_pairs(panned, b, rng, cfg)):
                yield f"s{s}_lf{k}_v{j}", pair


def ibr_pairs(cfg: CorpusConfig, scene_ids) -> tuple[list, list[str]]:
    ids, pairs = [], []
    for sid, pair in iter_ibr_pairs(cfg, scene_ids):
        ids.append(sid)
        pairs.append(pair)
    return pairs, ids


def label_ibr_pool(cfg: CorpusConfig, scene_ids, metric="mse", stride: int = 8, p95=None, net=None, scenes=None):
    """Stream the scenes' pairs straight into a labelled pool."""
    ids: list[str] = []

    def gen():
        for sid, pair in iter_ibr_pairs(cfg, scene_ids, scenes):
            ids.append(sid)
            yield pair

    class _Ids:
        def __getitem__(self, k):
            return ids[k]

    return label_distorted(gen(), metric, stride, p95=p95, net=net, ids=_Ids())


def natural_images(count: int, size: int, seed: int) -> list[np.ndarray]:
    """Clean images: renders of unseen layered scenes and bare textures."""
    rng = np.random.default_rng([seed, 12])
    out = []
    for i in range(count):
        if i % 4 == 3:
            out.append(procedural_texture(rng, size, size))
            continue
        scene = random_layered_scene(rng, size, size, n_layers=3, shapes_per_layer=3)
        pos = ViewPosition(float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2)))
        out.append(render_view(scene, pos).image.data)
    return out


@dataclass
class CorpusPools:
    distorted: LabeledPool
    natural: LabeledPool
    test_distorted: LabeledPool
    test_natural: LabeledPool


def build_pools(
    cfg: CorpusConfig,
    stride: int = 8,
    metric="mse",
    net=None,
    n_natural: int = 200,
    scenes: list | None = None,
) -> CorpusPools:
    """Labelled training and held-out pools.

    Held-out distorted data comes from scenes the training pool never saw
    (or, for user scenes, from fresh disparity corruptions of the same ones).
    Held-out labels use the training pool's p95.
    """
    if scenes:
        given = dict(enumerate(scenes))
        train_ids, test_ids = list(given), list(given)
    else:
        given = None
        train_ids = list(range(cfg.n_scenes))
        test_ids = list(range(cfg.n_scenes, cfg.n_scenes + 2))
    test_cfg = replace(cfg, lf_per_scene=max(1, cfg.lf_per_scene // 8), seed=cfg.seed + 1000)
    dist = label_ibr_pool(cfg, train_ids, metric, stride, net=net, scenes=given)
    test_dist = label_ibr_pool(test_cfg, test_ids, metric, stride, p95=dist.p95, net=net, scenes=given)
    nat = label_natural(natural_images(n_natural, cfg.view_size, cfg.seed), stride)
    n_test = max(4, n_natural // 10)
    test_nat = label_natural(natural_images(n_test, cfg.view_size, cfg.seed + 1000), stride, ids=[f"t{i:05d}" for i in range(n_test)])
    return CorpusPools(dist, nat, test_dist, test_nat)
