"""Acceptance gate: one PASS/FAIL line per criterion, each at its stated tolerance.

Criteria 6-8 share one trained FULL/NOBALANCE/NONATURAL trio per seed (3 seeds).
"""

import json
import time

import numpy as np
import pytest

from acceptance_log import record
from nrvm import capture_sim as cs
from nrvm import cli, corpus, dataset, evaluation, experiments, nn, trainer
from nrvm.metrics import dssim_map
from oracles import ssim_direct

pytestmark = pytest.mark.slow


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def _fd(f, x, analytic, h=1e-6):
    worst = 0.0
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        num = (fp - fm) / (2 * h)
        den = max(abs(num), abs(analytic[i]), 1e-8)
        worst = max(worst, abs(num - analytic[i]) / den)
    return worst


def _layer_errors(rng):
    errs = {}
    x = rng.random((2, 7, 6, 3))
    w, b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    for stride in (1, 2):
        y, cache = nn.conv_forward(x, w, b, stride)
        r = rng.normal(size=y.shape)
        f = lambda: float(np.sum(nn.conv_forward(x, w, b, stride)[0] * r))
        gx, gw, gb = nn.conv_backward(r, cache)
        errs[f"conv/s{stride}"] = max(_fd(f, x, gx), _fd(f, w, gw), _fd(f, b, gb))
    z = rng.normal(size=30)
    z[np.abs(z) < 0.01] = 0.5
    r = rng.normal(size=30)
    errs["relu"] = _fd(lambda: float(np.sum(nn.relu_forward(z)[0] * r)), z, nn.relu_backward(r, z))
    xd, wd, bd = rng.random((3, 5)), rng.normal(size=(2, 5)), rng.normal(size=2)
    r = rng.normal(size=(3, 2))
    f = lambda: float(np.sum(nn.dense_forward(xd, wd, bd)[0] * r))
    gx, gw, gb = nn.dense_backward(r, nn.dense_forward(xd, wd, bd)[1])
    errs["dense"] = max(_fd(f, xd, gx), _fd(f, wd, gw), _fd(f, bd, gb))
    xp = rng.random((2, 6, 6, 3))
    r = rng.normal(size=(2, 3, 3, 3))
    errs["maxpool"] = _fd(lambda: float(np.sum(nn.maxpool2_forward(xp)[0] * r)), xp, nn.maxpool2_backward(r, nn.maxpool2_forward(xp)[1]))
    p, t = rng.normal(size=9), rng.normal(size=9)
    errs["l1"] = _fd(lambda: nn.l1_loss(p, t)[0], p, nn.l1_loss(p, t)[1])
    return errs


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    rep = nn.gradcheck(nn.default_architecture(), seed=0, n_params=200, h=1e-4)
    layers = _layer_errors(np.random.default_rng(1))
    dt = time.perf_counter() - t0
    worst_layer = max(layers.values())
    ok = rep.n_checked >= 200 and rep.max_rel_error < 1e-3 and worst_layer < 1e-4 and dt < 60
    record(1, "gradient correctness", ok,
           f"network max rel err {rep.max_rel_error:.2e} over {rep.n_checked} params "
           f"({rep.n_skipped} kink skips); worst layer {worst_layer:.2e}; {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. SSIM
# ---------------------------------------------------------------------------


def test_2_ssim_fidelity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(100):
        a = rng.random((64, 64, 3))
        # half the pairs are correlated so SSIM spans its range, not just ~0
        b = rng.random((64, 64, 3)) if k % 2 else np.clip(a + rng.normal(0, 0.05 + 0.01 * k, a.shape), 0, 1)
        worst = max(worst, float(np.abs(dssim_map(a, b).data - (1 - ssim_direct(a, b))).max()))
    c = dssim_map(np.full((32, 32, 3), 0.5), np.full((32, 32, 3), 0.6)).data
    closed = 1 - (2 * 0.5 * 0.6 + 1e-4) / (0.5**2 + 0.6**2 + 1e-4)
    closed_err = float(np.abs(c - closed).max())
    ok = worst < 1e-5 and closed_err < 1e-6
    record(2, "SSIM fidelity", ok,
           f"max |diff| vs oracle {worst:.2e} on 100 pairs; constant case {float(c.mean()):.7f} "
           f"(closed form {closed:.7f}, err {closed_err:.1e})")
    assert ok


# ---------------------------------------------------------------------------
# 3. balancing
# ---------------------------------------------------------------------------


def test_3_balancing_uniformity():
    rng = np.random.default_rng(3)
    raw = rng.exponential(1.0, 200_000)
    resp = raw / np.percentile(raw, 95)  # p95-normalized, as the labels are
    recs = [dataset.PatchRecord("s", dataset.PatchRect(0, 0), dataset.PatchClass.DISTORTED, float(r)) for r in resp]
    t0 = time.perf_counter()
    sel = dataset.balance_sample(recs, dataset.BalanceConfig(10_000, 0.01, seed=3))
    dt = time.perf_counter() - t0
    got = np.array([r.response for r in sel.records])
    hist = np.histogram(got, bins=20, range=(0, 1))[0]
    before = np.histogram(resp, bins=20, range=(0, 1))[0]
    ratio = hist.max() / max(hist.min(), 1)
    ok = len(sel) == 10_000 and ratio <= 1.5 and dt < 30
    record(3, "balancing uniformity", ok,
           f"{len(sel)} selected; bin ratio {ratio:.3f} (pool before: {before.max() / before.min():.1f}); {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. architecture
# ---------------------------------------------------------------------------


def test_4_architecture_contract():
    spec = nn.default_architecture()
    convs = [l for l in spec.layers if l.kind == nn.Kind.CONV]
    relus = [l for l in spec.layers if l.kind == nn.Kind.RELU]
    out = nn.forward(spec, nn.init_params(spec, 0), np.zeros((1, 32, 32, 3), np.float32))[0]
    ok = (
        spec.param_count == 175_969
        and len(convs) == 5 and len(relus) == 5
        and all(c.stride == 2 for c in convs)
        and out.shape == (1, 1)
        and abs(spec.param_count - 175_537) / 175_537 < 0.0025
    )
    record(4, "architecture contract", ok,
           f"{spec.param_count} params ({100 * (spec.param_count / 175_537 - 1):+.3f}% vs 175,537); "
           f"channels {[c.out_ch for c in convs]}; output {out.shape}")
    assert ok


# ---------------------------------------------------------------------------
# 5. overfit
# ---------------------------------------------------------------------------


def _overfit_manifest():
    cfg = corpus.CorpusConfig(n_scenes=1, lf_per_scene=2, view_size=96, seed=5)
    pool = corpus.label_ibr_pool(cfg, [0], stride=16)
    nat = dataset.label_natural(corpus.natural_images(2, 96, 5), stride=16)
    return dataset.build_training_set(pool, nat, "full", dataset.BalanceConfig(50, epsilon=0.05, seed=5))


def test_5_overfit_sanity():
    m = _overfit_manifest()
    cfg = trainer.TrainConfig(epochs=500, batch_size=32, seed=5, val_fraction=0.0, decay_every=None)
    t0 = time.perf_counter()
    a = trainer.train(m, cfg)
    dt = time.perf_counter() - t0
    b = trainer.train(m, cfg)
    l1 = float(np.abs(trainer.predict_patches(a.handle, m.patches) - m.labels).mean())
    first = next((i for i, v in enumerate(a.losses) if v < 0.02), None)
    same = np.array_equal(a.handle.params.flat, b.handle.params.flat)
    ok = len(m) == 100 and l1 < 0.02 and same and dt < 120
    record(5, "overfit sanity", ok,
           f"{len(m)} patches; final L1 {l1:.4f} (epoch loss < 0.02 first at epoch {first}); "
           f"deterministic={same}; {dt:.1f}s per run")
    assert ok


# ---------------------------------------------------------------------------
# 6-8. trained predictors
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation():
    t0 = time.perf_counter()
    res = experiments.run_ablation(experiments.AblationConfig())
    return res, time.perf_counter() - t0


def test_6_ablation_ordering(ablation):
    res, dt = ablation
    v = res.verdict
    per_seed = "; ".join(
        f"s{r.seed} " + " ".join(f"{k}={rep.means['all']:.3f}/{rep.means['clean']:.4f}/{rep.means['distorted']:.3f}" for k, rep in r.reports.items())
        for r in res.runs
    )
    m = {k: r.means for k, r in res.median.items()}
    ok = v.table_pattern and dt < 1800
    record(6, "ablation ordering", ok,
           f"median all/clean/dist full={m['full']['all']:.3f}/{m['full']['clean']:.4f}/{m['full']['distorted']:.3f} "
           f"nobalance={m['nobalance']['all']:.3f}/{m['nobalance']['clean']:.4f}/{m['nobalance']['distorted']:.3f} "
           f"nonatural={m['nonatural']['all']:.3f}/{m['nonatural']['clean']:.4f}/{m['nonatural']['distorted']:.3f}; "
           f"FULL best ALL={v.full_best_all}, NOBALANCE<FULL CLEAN={v.nobalance_beats_full_clean}, "
           f"NONATURAL<FULL DISTORTED={v.nonatural_beats_full_distorted}; {dt / 60:.1f} min [{per_seed}]")
    assert ok


def test_7_misalignment_robustness(ablation):
    res, _ = ablation
    images = corpus.natural_images(10, 128, seed=7000)  # never used for training or testing
    ratios = []
    for run in res.runs:
        h = run.handles["full"]
        out = [evaluation.misalignment_experiment(h, img, 20) for img in images]
        fr = float(np.mean([o.fr_mean for o in out]))
        nr = float(np.mean([o.nr_mean for o in out]))
        ratios.append(nr / fr)
    med = float(np.median(ratios))
    ok = med < 0.2
    record(7, "misalignment robustness", ok,
           f"NR/FR mean ratio per seed {[round(r, 4) for r in ratios]}, median {med:.4f} (< 0.2)")
    assert ok


def test_8_adaptive_capture(ablation):
    res, _ = ablation
    t0 = time.perf_counter()
    lf = cs.LightField.from_scene(cs.demo_scene(), 7, 15)
    oracle = cs.SimConfig(0.004, cs.Scorer.oracle(), corrupt_strength=1.0)
    ro = cs.run_adaptive(lf, oracle)
    worst = float(ro.final_error.max())
    rs, js = [], []
    for run in res.runs:
        learned = cs.SimConfig(0.004, cs.Scorer.learned(run.handles["full"]), corrupt_strength=1.0)
        ag = cs.compare_scorers(lf, oracle, learned)
        rs.append(ag.r)
        js.append(ag.jaccard)
    pano = cs.LightField.from_scene(cs.panoramic_scene(180), 1, 180)
    rp = cs.run_adaptive(pano, cs.SimConfig(0.004, cs.Scorer.oracle(), corrupt_strength=1.0))
    dt = time.perf_counter() - t0
    r_med, j_med = float(np.median(rs)), float(np.median(js))
    parts = {
        "oracle bound": worst <= 0.004,
        "oracle sparsity": ro.sparsity < 0.6,
        "learned r": r_med >= 0.7,
        "learned jaccard": j_med >= 0.5,
        "panoramic sparsity": rp.sparsity < 0.5,
        "runtime": dt < 600,
    }
    ok = all(parts.values())
    record(8, "adaptive capture", ok,
           f"oracle {len(ro.captured)}/105 captured (sparsity {ro.sparsity:.3f}), max view error {worst:.5f}; "
           f"learned r {[round(r, 3) for r in rs]} median {r_med:.3f}, Jaccard {[round(j, 3) for j in js]} median {j_med:.3f}; "
           f"panoramic sparsity {rp.sparsity:.3f}; {dt:.0f}s; failed: {[k for k, v in parts.items() if not v] or 'none'}")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------


def _pipeline(out):
    gen = ["gen-data", "--n-scenes", "1", "--lf-per-scene", "2", "--view-size", "64", "--natural-images", "8",
           "--target-count", "40", "--test-count", "20", "--stride", "16", "--epsilon", "0.1", "--seed", "9"]
    steps = [
        gen + ["--out-dir", out / "data"],
        ["train", "--manifest", out / "data" / "manifest_full.json", "--epochs", "2", "--batch-size", "16",
         "--seed", "9", "--out-dir", out / "train"],
        ["predict", "--weights", out / "train" / "weights.nnwt", "--image", out / "img.png", "--out-dir", out / "pred"],
        ["eval", "--weights", f"full={out / 'train' / 'weights.nnwt'}", "--test-manifest",
         out / "data" / "manifest_test.json", "--out-dir", out / "eval"],
        ["simulate", "--rows", "3", "--cols", "5", "--out-dir", out / "sim"],
        ["invariance", "--weights", out / "train" / "weights.nnwt", "--image", out / "img.png", "--out-dir", out / "inv"],
    ]
    from nrvm.imaging import Image, save_image

    (out).mkdir(parents=True, exist_ok=True)
    save_image(Image(np.random.default_rng(9).random((48, 80, 3))), out / "img.png")
    return [cli.main([str(a) for a in s]) for s in steps]


def test_9_determinism(tmp_path):
    codes = [_pipeline(tmp_path / r) for r in ("a", "b")]
    files = sorted(
        p.relative_to(tmp_path / "a")
        for p in (tmp_path / "a").rglob("*")
        if p.suffix in (".fmap", ".nnwt", ".json", ".bin")
    )
    diff = []
    for rel in files:
        a, b = (tmp_path / "a" / rel).read_bytes(), (tmp_path / "b" / rel).read_bytes()
        if rel.name == "config.json":  # records its own --out-dir
            a = json.dumps({k: v for k, v in json.loads(a)["args"].items() if k not in ("out_dir", "manifest", "weights", "image", "test_manifest")}).encode()
            b = json.dumps({k: v for k, v in json.loads(b)["args"].items() if k not in ("out_dir", "manifest", "weights", "image", "test_manifest")}).encode()
        if a != b:
            diff.append(str(rel))
    kinds = {s: sum(p.suffix == s for p in files) for s in (".fmap", ".nnwt", ".json")}
    ok = codes[0] == codes[1] == [0] * 6 and not diff and all(kinds.values())
    record(9, "determinism", ok, f"{len(files)} outputs compared {kinds}; exit codes {codes[0]}; differing: {diff or 'none'}")
    assert ok
