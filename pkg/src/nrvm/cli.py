"""Command-line entry point: ``nrvm <verb> [flags]``.

Every run writes ``config.json`` into ``--out-dir`` with the effective
parameters; ``--config config.json`` replays it (explicit flags still win).
Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import capture_sim as cs
from . import corpus, dataset, evaluation, nn, trainer
from ._accel import backend
from .dibr import load_scene
from .imaging import Image, ImageIOError, false_color, load_image, save_float_map, save_image
from .metrics import FeatureNet, MetricKind

log = logging.getLogger("nrvm")

STRATEGIES = [s.value for s in dataset.Strategy]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out(args, name: str) -> Path:
    return Path(args.out_dir) / name


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, [])]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _feature_net(args):
    if MetricKind(args.metric) != MetricKind.FEATURE:
        return None
    if not args.feature_weights:
        raise UsageError("--metric feature requires --feature-weights")
    return FeatureNet.load(args.feature_weights)


def _save_map(m, stem: Path, lo: float, hi: float, colormap: str = "ramp") -> None:
    save_float_map(m, stem.with_suffix(".fmap"))
    if colormap != "none":
        save_image(false_color(m, lo, hi), stem.with_suffix(".png"))


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = corpus.CorpusConfig(
        n_scenes=args.n_scenes, lf_per_scene=args.lf_per_scene, view_size=args.view_size, seed=args.seed
    )
    scenes = [load_scene(p) for p in args.scene] if args.scene else None
    pools = corpus.build_pools(cfg, args.stride, args.metric, _feature_net(args), args.natural_images, scenes)
    bal = dataset.BalanceConfig(args.target_count, args.epsilon, seed=args.seed)
    wanted = STRATEGIES if args.strategy == "all" else [args.strategy]
    summary = {"p95": pools.distorted.p95, "pool": len(pools.distorted), "manifests": {}}
    for name in wanted:
        m = dataset.build_training_set(pools.distorted, pools.natural, name, bal, args.metric)
        dataset.write_manifest(m, _out(args, f"manifest_{name}.json"))
        summary["manifests"][name] = {"patches": len(m), "underfilled": m.underfilled}
        if m.underfilled:
            log.warning("%s manifest underfilled: %d patches", name, len(m))
    if args.test_count:
        test = dataset.build_test_set(pools.test_distorted, pools.test_natural, args.metric, args.seed, args.test_count, args.epsilon)
        dataset.write_manifest(test, _out(args, "manifest_test.json"))
        summary["manifests"]["test"] = {"patches": len(test), "underfilled": False}
    _dump(_out(args, "p95.json"), summary)


def cmd_train(args) -> None:
    _need(args, "manifest")
    m = dataset.read_manifest(args.manifest)
    cfg = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        lr=args.lr,
        lr_decay=args.lr_decay,
        decay_every=args.decay_every or None,
        val_fraction=args.val_fraction,
    )
    init = nn.load_weights(args.init)[1] if args.init else None
    result = trainer.train(m, cfg, init=init)
    result.handle.save(_out(args, "weights.nnwt"))
    result.write_log(_out(args, "train_log.txt"))


def cmd_predict(args) -> None:
    _need(args, "weights", "image")
    h = trainer.PredictorHandle.load(args.weights)
    img = load_image(args.image)
    m = trainer.predict_map(h, img, args.stride)
    lo, hi = args.range
    _save_map(m, _out(args, f"{Path(args.image).stem}_map"), lo, hi, args.colormap)


def _named_weights(items) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        out[name] = path
    return out


def cmd_eval(args) -> None:
    _need(args, "weights", "test_manifest")
    test = dataset.read_manifest(args.test_manifest)
    reports = {}
    for name, path in _named_weights(args.weights).items():
        rep = evaluation.evaluate(trainer.PredictorHandle.load(path), test, name)
        reports[name] = rep
        evaluation.write_curve_csv(_out(args, f"{name}_sorted.csv"), list(enumerate(rep.sorted_error)))
        evaluation.write_curve_csv(_out(args, f"{name}_response.csv"), rep.response_curve)
    verdict = None
    if {"full", "nonatural", "nobalance"} <= reports.keys():
        verdict = evaluation.compare_strategies(reports["full"], reports["nonatural"], reports["nobalance"])
    evaluation.write_report(_out(args, "report.json"), reports, verdict)
    table = "\n".join(evaluation.table_rows(reports)) + "\n"
    _out(args, "table.txt").write_text(table)
    print(table, end="")


def _lightfield(args) -> cs.LightField:
    rows, cols = (1, args.cols or 180) if args.mode == "panoramic" else (args.rows or 7, args.cols or 15)
    if args.scene in (None, "demo"):
        scene = cs.panoramic_scene(cols) if args.mode == "panoramic" else cs.demo_scene()
    elif args.scene == "panorama":
        scene = cs.panoramic_scene(cols)
    else:
        scene = load_scene(args.scene)
    return cs.LightField.from_scene(scene, rows, cols)


def cmd_simulate(args) -> None:
    lf = _lightfield(args)
    if args.scorer == "learned":
        _need(args, "weights")
        scorer = cs.Scorer.learned(trainer.PredictorHandle.load(args.weights), args.stride)
    else:
        scorer = cs.Scorer.oracle(args.metric, _feature_net(args))
    cfg = cs.SimConfig(
        args.threshold, scorer, args.time_per_capture, args.max_iterations, args.disparity_noise, seed=args.seed
    )
    report = cs.run_adaptive(lf, cfg)
    doc = report.to_json()
    doc.pop("trace")
    _dump(_out(args, "capture_report.json"), doc)
    cs.write_trace(_out(args, "trace.json"), report)
    mask = np.zeros((lf.rows, lf.cols))
    for rc in report.captured:
        mask[rc] = 1.0
    save_image(false_color(cs.upscale_grid(mask), 0.0, 1.0), _out(args, "captured.png"))
    hi = args.threshold if 0 < args.threshold < math.inf else max(float(report.final_error.max()), 1e-12)
    save_image(false_color(cs.upscale_grid(report.final_error), 0.0, 2 * hi), _out(args, "final_error.png"))
    print(f"captured {len(report.captured)}/{report.dense} (sparsity {report.sparsity:.3f}) in {report.iterations} iterations")


def cmd_invariance(args) -> None:
    _need(args, "weights", "image")
    h = trainer.PredictorHandle.load(args.weights)
    img = load_image(args.image)
    net = _feature_net(args) if h.metric == MetricKind.FEATURE else None
    res = evaluation.misalignment_experiment(h, img, args.shift, args.stride, net=net)
    hi = max(res.fr_map.data.max(), res.nr_map.data.max(), 1e-12)
    _save_map(res.fr_map, _out(args, "fr_map"), 0.0, hi)
    _save_map(res.nr_map, _out(args, "nr_map"), 0.0, hi)
    side = np.concatenate([false_color(res.fr_map, 0, hi).data, false_color(res.nr_map, 0, hi).data], axis=1)
    save_image(Image(side), _out(args, "side_by_side.png"))
    summary = {"shift": args.shift, "fr_mean": res.fr_mean, "nr_mean": res.nr_mean, "ratio": res.nr_mean / res.fr_mean if res.fr_mean else None}
    _dump(_out(args, "summary.json"), summary)
    print(f"FR mean {res.fr_mean:.5f}  NR mean {res.nr_mean:.5f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "invariance": cmd_invariance,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker thread cap; 1 guarantees determinism")
    common.add_argument("--out-dir", default="out")
    common.add_argument("--config", help="replay a config.json written by an earlier run")
    common.add_argument("--metric", choices=[m.value for m in MetricKind], default="mse")
    common.add_argument("--feature-weights", help="NNWT feature network for --metric feature")
    common.add_argument("--verbose", action="store_true")

    p = _Parser(prog="nrvm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="build labelled training/test manifests")
    g.add_argument("--scene", action="append", default=[], help="scene JSON (repeatable); default: synthetic scenes")
    g.add_argument("--n-scenes", type=int, default=5)
    g.add_argument("--lf-per-scene", type=int, default=80)
    g.add_argument("--view-size", type=int, default=128)
    g.add_argument("--natural-images", type=int, default=200)
    g.add_argument("--strategy", choices=STRATEGIES + ["all"], default="all")
    g.add_argument("--target-count", type=int, default=25000)
    g.add_argument("--test-count", type=int, default=2000)
    g.add_argument("--stride", type=int, default=8)
    g.add_argument("--epsilon", type=float, default=dataset.DEFAULT_EPSILON)

    t = sub.add_parser("train", parents=[common], help="train a predictor on a manifest")
    t.add_argument("--manifest")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-decay", type=float, default=0.5)
    t.add_argument("--decay-every", type=int, default=10, help="epochs per decay step; 0 disables decay")
    t.add_argument("--val-fraction", type=float, default=0.05)
    t.add_argument("--init", help="start from these NNWT weights")

    pr = sub.add_parser("predict", parents=[common], help="predict a per-pixel map for one image")
    pr.add_argument("--weights")
    pr.add_argument("--image")
    pr.add_argument("--stride", type=int, default=trainer.DEFAULT_MAP_STRIDE)
    pr.add_argument("--colormap", choices=["ramp", "none"], default="ramp")
    pr.add_argument("--range", type=float, nargs=2, default=[0.0, 1.0], metavar=("LO", "HI"))

    e = sub.add_parser("eval", parents=[common], help="strategy comparison on a labelled test manifest")
    e.add_argument("--weights", action="append", default=[], help="NAME=PATH (repeatable)")
    e.add_argument("--test-manifest")

    s = sub.add_parser("simulate", parents=[common], help="adaptive light-field capture simulation")
    s.add_argument("--scene", help="'demo', 'panorama' or a scene JSON")
    s.add_argument("--mode", choices=["array", "panoramic"], default="array")
    s.add_argument("--rows", type=int)
    s.add_argument("--cols", type=int)
    s.add_argument("--threshold", type=float, default=0.004)
    s.add_argument("--scorer", choices=["oracle", "learned"], default="oracle")
    s.add_argument("--weights")
    s.add_argument("--stride", type=int, default=trainer.DEFAULT_MAP_STRIDE)
    s.add_argument("--disparity-noise", type=float, default=1.0, help="edge corruption of captured disparity")
    s.add_argument("--time-per-capture", type=float, default=1.0)
    s.add_argument("--max-iterations", type=int)

    i = sub.add_parser("invariance", parents=[common], help="FR vs NR response to a shifted copy")
    i.add_argument("--weights")
    i.add_argument("--image")
    i.add_argument("--shift", type=int, default=20)
    i.add_argument("--stride", type=int, default=trainer.DEFAULT_MAP_STRIDE)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("missing command")
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config: {exc}") from exc
        if doc.get("command") != args.command:
            raise UsageError(f"config is for '{doc.get('command')}', not '{args.command}'")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k: v for k, v in doc["args"].items() if k not in ("config", "out_dir")})
        args = parser.parse_args(argv)
    return args


def _echo(args) -> None:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "config")}
    _dump(_out(args, "config.json"), {"command": args.command, "args": params, "backend": backend()})


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        _echo(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"nrvm: error: {exc}", file=sys.stderr)
        return 1
    except (dataset.DataError, ImageIOError, nn.WeightsError, trainer.TrainingError, OSError, ValueError, KeyError) as exc:
        print(f"nrvm: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
