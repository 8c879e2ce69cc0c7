"""Desk-scale versions of the strategy ablation and the misalignment study."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import corpus, dataset, evaluation, trainer
from .dataset import BalanceConfig, DatasetManifest, Strategy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationConfig:
    corpus: corpus.CorpusConfig = corpus.CorpusConfig(lf_per_scene=80)
    stride: int = 8
    n_natural: int = 200
    target_count: int = 25_000  # 2 * target = 50k patches per manifest
    test_count: int = 2_000
    epochs: int = 9
    decay_every: int = 3  # the 30-epoch default's shape (decay at 1/3, 2/3), scaled down
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class AblationRun:
    seed: int
    handles: dict[str, trainer.PredictorHandle]
    reports: dict[str, evaluation.EvalReport]
    verdict: evaluation.OrderingVerdict


@dataclass
class AblationResult:
    runs: list[AblationRun]
    test: DatasetManifest
    pools: corpus.CorpusPools
    median: dict[str, evaluation.EvalReport] = field(default_factory=dict)

    @property
    def verdict(self) -> evaluation.OrderingVerdict:
        m = self.median
        return evaluation.compare_strategies(m["full"], m["nonatural"], m["nobalance"])


def median_report(reports: list[evaluation.EvalReport], label: str = "median") -> evaluation.EvalReport:
    """Cell-wise median of per-partition means (curves are not aggregated)."""
    means = {}
    for part in evaluation.Partition:
        vals = [r.mean(part) for r in reports]
        means[part.value] = None if any(v is None for v in vals) else float(np.median(vals))
    first = reports[0]
    return evaluation.EvalReport(means, dict(first.counts), [], [], first.test_fingerprint, label)


def run_ablation(cfg: AblationConfig | None = None, pools: corpus.CorpusPools | None = None) -> AblationResult:
    """Train FULL / NOBALANCE / NONATURAL for every seed and evaluate on one shared test manifest."""
    cfg = cfg or AblationConfig()
    pools = pools or corpus.build_pools(cfg.corpus, cfg.stride, n_natural=cfg.n_natural)
    test = dataset.build_test_set(pools.test_distorted, pools.test_natural, seed=cfg.corpus.seed, count=cfg.test_count)
    runs = []
    for seed in cfg.seeds:
        handles, reports = {}, {}
        for strategy in Strategy:
            m = dataset.build_training_set(pools.distorted, pools.natural, strategy, BalanceConfig(cfg.target_count, seed=seed))
            tc = trainer.TrainConfig(epochs=cfg.epochs, seed=seed, decay_every=cfg.decay_every)
            h = trainer.train(m, tc).handle
            handles[strategy.value] = h
            reports[strategy.value] = evaluation.evaluate(h, test, strategy.value)
            log.info("seed %d %s %s", seed, strategy.value, reports[strategy.value].means)
        verdict = evaluation.compare_strategies(reports["full"], reports["nonatural"], reports["nobalance"])
        runs.append(AblationRun(seed, handles, reports, verdict))
    result = AblationResult(runs, test, pools)
    for name in (s.value for s in Strategy):
        result.median[name] = median_report([r.reports[name] for r in runs], name)
    return result
