"""Command-line entry point.

Every subcommand reads and writes artifacts in ``--out`` so the stages can
be run one at a time (``bench-gen``, ``cluster``, ``train-classifier``,
``train-gan``, ``synth``, ``eval``) or all at once (``pipeline``).
"""
import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from .clustering import PrototypeBank
from .config import PipelineConfig, load_config, set_path
from .data import FeatureDataset, load_features, make_synthetic_benchmark, save_features
from .errors import AnchorGzslError, ConfigError, DataError
from .gradcheck import CHECKS
from .nn import load_mlp
from .pipeline import (hyper_values, persist, prepare, read_split, report_json, run_pipeline,
                       stage_classifier, stage_cluster, stage_eval, stage_gan, stage_synth,
                       sweep_augmentation_factor, sweep_hyper)
from .synthesis import SoftmaxClassifier

log = logging.getLogger("anchorgzsl")

GRADCHECK_TOL = 1e-4
METRICS = ("acc_s", "acc_u", "h", "acc_u_matched", "h_matched")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", default=".", help="artifact directory (default: cwd)")
    p.add_argument("--format", choices=["csv", "fvec1"], default="csv", help="feature file format")
    p.add_argument("--data", help="feature file (default: features file in --out, else the benchmark)")
    p.add_argument("--split", help="split JSON (default: split.json in --out, else the benchmark split)")
    p.add_argument("--attributes", help="per-class attribute table, one whitespace-separated row per class")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set gan.epochs=10")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="anchorgzsl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("bench-gen", parents=[common], help="write the synthetic benchmark")
    sub.add_parser("cluster", parents=[common], help="fit seen then unseen prototypes")
    sub.add_parser("train-classifier", parents=[common], help="pretrain the seen-class classifier")
    sub.add_parser("train-gan", parents=[common], help="train the conditional generator and critic")
    p = sub.add_parser("synth", parents=[common], help="sample synthetic features for every class")
    p.add_argument("--per-class", type=int, help="samples per class (default: config synth_per_class)")
    sub.add_parser("eval", parents=[common], help="train the final softmax and evaluate")
    sub.add_parser("pipeline", parents=[common], help="run every stage")
    p = sub.add_parser("sweep-aug", parents=[common], help="sweep synthetic samples per class")
    p.add_argument("--factors", default="0,50,100,200,400", help="comma-separated counts")
    p = sub.add_parser("sweep-hyper", parents=[common], help="sweep one loss weight or threshold")
    p.add_argument("--param", required=True, help="lambda1, lambda2, lambda3, sigma1 or sigma2")
    p.add_argument("--values", help="comma-separated values (default: the preset range)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of every loss")
    p.add_argument("--seeds", type=int, default=20, help="seeds per loss")
    return parser


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def resolve_config(args):
    if args.config:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    else:
        if args.seed is None:
            raise ConfigError("a seed is required: pass --seed or a config with one")
        cfg = PipelineConfig(seed=args.seed)
    if args.seed is not None:
        cfg.seed = args.seed
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_path(cfg, key, value)
    cfg.out_dir = args.out
    return cfg.validate()


def _existing(out, stem):
    hits = sorted(glob.glob(os.path.join(out, stem + ".csv")) + glob.glob(os.path.join(out, stem + ".fvec")))
    return hits[0] if hits else None


def resolve_data(args, cfg):
    """Returns ``(dataset, split, indices)``; indices are ``None`` when no split file records them."""
    path = args.data or _existing(args.out, "features")
    split, indices = None, None
    if path:
        data = load_features(path, "fvec1" if path.endswith(".fvec") else None)
    else:
        b = cfg.bench
        data, split = make_synthetic_benchmark(b.K, b.n_seen, b.d, b.sep_cos_max, b.n_per_class,
                                               b.noise_std, seed=cfg.seed, overlap_cos=b.overlap_cos)
    split_path = args.split or os.path.join(args.out, "split.json")
    if os.path.exists(split_path):
        split, indices = read_split(split_path)
    elif args.split:
        raise DataError(f"split file not found: {args.split}")
    if split is None and not (cfg.split.seen_classes and cfg.split.unseen_classes):
        raise ConfigError("no split: pass --split or set split.seen_classes and split.unseen_classes")
    if args.attributes:
        data.attributes = np.loadtxt(args.attributes, ndmin=2)
        FeatureDataset.__post_init__(data)
    return data, split, indices


def _read_json(out, name, required=True):
    path = os.path.join(out, name)
    if not os.path.exists(path):
        if required:
            raise DataError(f"missing artifact {path}; run the earlier stage first")
        return None
    with open(path) as fh:
        return json.load(fh)


def load_state(args, cfg):
    """Rebuild a pipeline state from ``--out``, loading whatever artifacts exist."""
    data, split, indices = resolve_data(args, cfg)
    state = prepare(cfg, data, split, indices)
    out = args.out
    doc = _read_json(out, "bank.json", required=False)
    if doc is not None:
        state.bank = PrototypeBank.from_dict(doc)
    doc = _read_json(out, "classifier.json", required=False)
    if doc is not None:
        state.clf = SoftmaxClassifier.from_dict(doc)
    if os.path.exists(os.path.join(out, "generator.json")):
        state.G, _ = load_mlp(os.path.join(out, "generator.json"))
        state.D, _ = load_mlp(os.path.join(out, "critic.json"))
    path = _existing(out, "synth")
    if path:
        ds = load_features(path, "fvec1" if path.endswith(".fvec") else None)
        state.synth = (ds.features, np.array([state.to_internal[int(c)] for c in ds.labels], dtype=int))
    return state


def _require(state, *names):
    for name in names:
        if getattr(state, name) is None:
            raise DataError(f"stage input {name!r} missing in the artifact directory; run the earlier stage first")


def print_metrics(report, prefix="", stream=None):
    stream = stream or sys.stdout
    line = " ".join(f"{k}={getattr(report, k):.4f}" for k in METRICS)
    print(f"{prefix}{line}", file=stream)


def cmd_bench_gen(args, cfg):
    b = cfg.bench
    data, split = make_synthetic_benchmark(b.K, b.n_seen, b.d, b.sep_cos_max, b.n_per_class, b.noise_std,
                                           seed=cfg.seed, overlap_cos=b.overlap_cos)
    os.makedirs(args.out, exist_ok=True)
    ext = "csv" if args.format == "csv" else "fvec"
    save_features(data, os.path.join(args.out, f"features.{ext}"), args.format)
    state = prepare(cfg, data, split)
    persist(state, args.out, args.format)
    np.savetxt(os.path.join(args.out, "class_means.txt"), data.class_means, fmt="%.17g")
    print(f"rows={data.features.shape[0]} dim={data.dim} classes={data.n_classes} "
          f"seen={split.seen_classes} unseen={split.unseen_classes}")


def _stage_cmd(args, cfg, need, run):
    state = load_state(args, cfg)
    _require(state, *need)
    run(state)
    persist(state, args.out, args.format)
    return state


def cmd_cluster(args, cfg):
    state = _stage_cmd(args, cfg, (), stage_cluster)
    b = state.bank
    cos = b.seen @ b.unseen.T
    print(f"prototypes={b.n_total} max_seen_unseen_cos={cos.max():.4f}")


def cmd_train_classifier(args, cfg):
    state = _stage_cmd(args, cfg, (), stage_classifier)
    print(f"classes={state.clf.classes}")


def cmd_train_gan(args, cfg):
    _stage_cmd(args, cfg, ("bank", "clf"), stage_gan)
    print("generator and critic saved")


def cmd_synth(args, cfg):
    state = _stage_cmd(args, cfg, ("bank", "G"), lambda s: stage_synth(s, args.per_class))
    print(f"synthetic_rows={state.synth[0].shape[0]}")


def _emit_report(state, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report_json(state))
    print_metrics(state.report)


def cmd_eval(args, cfg):
    state = _stage_cmd(args, cfg, ("bank", "synth"), stage_eval)
    _emit_report(state, args.out)


def cmd_pipeline(args, cfg):
    data, split, indices = resolve_data(args, cfg)
    if indices is not None:
        state = prepare(cfg, data, split, indices)
        for stage in (stage_cluster, stage_classifier, stage_gan, stage_synth, stage_eval):
            stage(state)
        persist(state, args.out, args.format)
    else:
        state = run_pipeline(cfg, data, split, args.out, args.format)
    _emit_report(state, args.out)


def _sweep_report(path, rows):
    with open(path, "w") as fh:
        json.dump(rows, fh, sort_keys=True, indent=2)


def cmd_sweep_aug(args, cfg):
    factors = [int(f) for f in _floats(args.factors)]
    data, split, _ = resolve_data(args, cfg)
    results = sweep_augmentation_factor(cfg, data, factors, split, args.out)
    for f, r in results:
        print_metrics(r, prefix=f"factor={f} ")
    _sweep_report(os.path.join(args.out, "report.json"),
                  [{"factor": f, **{k: getattr(r, k) for k in METRICS}} for f, r in results])


def cmd_sweep_hyper(args, cfg):
    values = _floats(args.values) if args.values else hyper_values(args.param)
    data, split, _ = resolve_data(args, cfg)
    results = sweep_hyper(cfg, data, args.param, values, split, args.out)
    for v, r in results:
        print_metrics(r, prefix=f"{args.param}={v:g} ")
    _sweep_report(os.path.join(args.out, "report.json"),
                  [{args.param: v, **{k: getattr(r, k) for k in METRICS}} for v, r in results])


def cmd_gradcheck(args, cfg):
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    worst = {name: float(max(fn(s) for s in seeds)) for name, fn in CHECKS.items()}
    for name, err in worst.items():
        print(f"{name:16s} max_rel_err={err:.3e} {'ok' if err <= GRADCHECK_TOL else 'FAIL'}")
    os.makedirs(args.out, exist_ok=True)
    _sweep_report(os.path.join(args.out, "report.json"), {"tolerance": GRADCHECK_TOL, "max_rel_err": worst})
    if max(worst.values()) > GRADCHECK_TOL:
        return 4
    return 0


COMMANDS = {
    "bench-gen": cmd_bench_gen,
    "cluster": cmd_cluster,
    "train-classifier": cmd_train_classifier,
    "train-gan": cmd_train_gan,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "sweep-aug": cmd_sweep_aug,
    "sweep-hyper": cmd_sweep_hyper,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck" and args.seed is None and not args.config:
            args.seed = 0
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg) or 0
    except AnchorGzslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
