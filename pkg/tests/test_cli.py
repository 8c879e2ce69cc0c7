import json

import numpy as np
import pytest

from nrvm import cli
from nrvm.imaging import read_fmap, save_image, Image

GEN = ["gen-data", "--n-scenes", "1", "--lf-per-scene", "2", "--view-size", "64", "--natural-images", "6",
       "--target-count", "20", "--test-count", "10", "--stride", "16", "--epsilon", "0.2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(*GEN, "--out-dir", d / "data") == 0
    for s in ("full", "nobalance", "nonatural"):
        assert run("train", "--manifest", d / "data" / f"manifest_{s}.json", "--epochs", "1", "--batch-size", "16",
                   "--out-dir", d / s) == 0
    img = np.random.default_rng(0).uniform(0, 1, (48, 64, 3))
    save_image(Image(img), d / "img.png")
    return d


def test_gen_data_outputs(work):
    files = {p.name for p in (work / "data").iterdir()}
    for s in ("full", "nobalance", "nonatural", "test"):
        assert {f"manifest_{s}.json", f"manifest_{s}.bin"} <= files
    summary = json.loads((work / "data" / "p95.json").read_text())
    assert summary["p95"] > 0 and summary["manifests"]["full"]["patches"] == 40
    cfg = json.loads((work / "data" / "config.json").read_text())
    assert cfg["command"] == "gen-data" and cfg["backend"] in ("numba", "numpy")


def test_train_outputs(work):
    assert (work / "full" / "weights.nnwt").stat().st_size > 0
    assert json.loads((work / "full" / "weights.json").read_text())["metric"] == "mse"
    assert len((work / "full" / "train_log.txt").read_text().splitlines()) == 1


def test_predict_writes_map(work):
    out = work / "pred"
    assert run("predict", "--weights", work / "full" / "weights.nnwt", "--image", work / "img.png", "--out-dir", out) == 0
    m = read_fmap(out / "img_map.fmap")
    assert m.shape[:2] == (48, 64) and (out / "img_map.png").exists()
    assert run("predict", "--weights", work / "full" / "weights.nnwt", "--image", work / "img.png",
               "--colormap", "none", "--out-dir", work / "pred2") == 0
    assert not (work / "pred2" / "img_map.png").exists()


def test_eval_writes_report_and_verdict(work, capsys):
    out = work / "eval"
    argv = ["eval", "--test-manifest", work / "data" / "manifest_test.json", "--out-dir", out]
    for s in ("full", "nobalance", "nonatural"):
        argv += ["--weights", f"{s}={work / s / 'weights.nnwt'}"]
    assert run(*argv) == 0
    doc = json.loads((out / "report.json").read_text())
    assert set(doc["reports"]) == {"full", "nobalance", "nonatural"} and "table_pattern" in doc["verdicts"]
    assert "full" in (out / "table.txt").read_text()
    assert (out / "full_sorted.csv").exists() and (out / "nonatural_response.csv").exists()
    assert "strategy" in capsys.readouterr().out


def test_simulate_oracle_and_learned(work):
    out = work / "sim"
    assert run("simulate", "--rows", "3", "--cols", "3", "--out-dir", out) == 0
    rep = json.loads((out / "capture_report.json").read_text())
    assert rep["dense"] == 9 and 4 <= rep["n_captured"] <= 9
    for f in ("trace.json", "captured.png", "final_error.png"):
        assert (out / f).exists()
    assert run("simulate", "--rows", "3", "--cols", "3", "--scorer", "learned",
               "--weights", work / "full" / "weights.nnwt", "--out-dir", work / "sim2") == 0
    assert run("simulate", "--mode", "panoramic", "--cols", "9", "--out-dir", work / "sim3") == 0
    assert json.loads((work / "sim3" / "capture_report.json").read_text())["dense"] == 9


def test_invariance(work):
    out = work / "inv"
    assert run("invariance", "--weights", work / "full" / "weights.nnwt", "--image", work / "img.png",
               "--shift", "5", "--out-dir", out) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["shift"] == 5 and s["fr_mean"] > 0
    for f in ("fr_map.fmap", "nr_map.fmap", "side_by_side.png"):
        assert (out / f).exists()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run() == 1
    assert run("bogus") == 1
    assert run("train", "--out-dir", tmp_path) == 1  # missing --manifest
    assert run("train", "--epochs", "x") == 1
    assert run("predict", "--threads", "0", "--out-dir", tmp_path) == 1
    assert run("simulate", "--scorer", "learned", "--out-dir", tmp_path) == 1
    assert run("train", "--config", tmp_path / "missing.json", "--out-dir", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, work):
    bad = tmp_path / "m.json"
    bad.write_text("{")
    assert run("train", "--manifest", bad, "--out-dir", tmp_path) == 2
    assert run("predict", "--weights", tmp_path / "none.nnwt", "--image", work / "img.png", "--out-dir", tmp_path) == 2
    (tmp_path / "x.png").write_bytes(b"not a png")
    assert run("predict", "--weights", work / "full" / "weights.nnwt", "--image", tmp_path / "x.png", "--out-dir", tmp_path) == 2


def test_config_replay_reproduces_run(tmp_path, work):
    assert run("simulate", "--rows", "3", "--cols", "4", "--threshold", "0.002", "--out-dir", tmp_path / "a") == 0
    assert run("simulate", "--config", tmp_path / "a" / "config.json", "--out-dir", tmp_path / "b") == 0
    ca = json.loads((tmp_path / "a" / "config.json").read_text())
    cb = json.loads((tmp_path / "b" / "config.json").read_text())
    ca["args"].pop("out_dir"), cb["args"].pop("out_dir")
    assert ca == cb
    assert (tmp_path / "a" / "trace.json").read_bytes() == (tmp_path / "b" / "trace.json").read_bytes()
    # explicit flags win over the replayed file
    assert run("simulate", "--config", tmp_path / "a" / "config.json", "--threshold", "1", "--out-dir", tmp_path / "c") == 0
    assert json.loads((tmp_path / "c" / "config.json").read_text())["args"]["threshold"] == 1.0
    assert run("train", "--config", tmp_path / "a" / "config.json", "--out-dir", tmp_path / "d") == 1


def test_rerun_is_byte_identical(tmp_path, work):
    for name in ("x", "y"):
        d = tmp_path / name
        assert run(*GEN, "--strategy", "full", "--out-dir", d) == 0
        assert run("train", "--manifest", d / "manifest_full.json", "--epochs", "1", "--batch-size", "16", "--out-dir", d / "t") == 0
    for rel in ("manifest_full.json", "manifest_full.bin", "manifest_test.bin", "p95.json", "t/weights.nnwt", "t/train_log.txt"):
        assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes(), rel
