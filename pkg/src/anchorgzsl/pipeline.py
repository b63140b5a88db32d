"""End-to-end orchestration with resumable, persisted stages.

Stage order: split, cluster (seen then unseen), pretrain classifier,
train GAN, synthesize, train final softmax, evaluate. Each stage draws
from its own named Philox substream of the pipeline seed, so any stage can
be rerun from persisted inputs and reproduce the same output.

Labels are remapped internally so that seen classes occupy
``0..n_seen-1`` and true unseen classes ``n_seen..K-1``; the unseen
prototypes carry the same (anonymous) ids.
"""
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .clustering import PrototypeBank, fit_seen_prototypes, fit_unseen_prototypes
from .data import FeatureDataset, save_features
from .errors import AnchorGzslError, ConfigError
from .evaluation import (SplitSpec, assemble_training_set, evaluate_gzsl, stratified_split,
                         synthesize_dataset, train_softmax)
from .nn import save_mlp
from .numerics import make_rng
from .synthesis import SoftmaxClassifier, pretrain_classifier, train_gan

log = logging.getLogger(__name__)

HYPER_PRESETS = {
    "lambda1": ("cluster", "lambda1", 0.4, 1.5, 0.05),
    "lambda2": ("cluster", "lambda2", 0.4, 1.5, 0.05),
    "lambda3": ("gan", "lambda3", 0.4, 1.5, 0.05),
    "sigma1": ("cluster", "sigma1", 0.1, 0.5, 0.05),
    "sigma2": ("cluster", "sigma2", 0.1, 0.5, 0.05),
}


class StageError(AnchorGzslError):
    """Wraps a module error with the pipeline stage it came from."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


@dataclass
class PipelineState:
    cfg: object
    data: FeatureDataset
    split: SplitSpec
    to_internal: dict
    indices: dict
    bank: PrototypeBank = None
    clf: SoftmaxClassifier = None
    G: object = None
    D: object = None
    synth: tuple = None
    final: SoftmaxClassifier = None
    report: object = None

    def rows(self, key):
        idx = self.indices[key]
        y = np.array([self.to_internal[int(c)] for c in self.data.labels[idx]], dtype=int)
        return self.data.features[idx], y

    @property
    def internal_split(self):
        n_s = len(self.split.seen_classes)
        return replace(self.split, seen_classes=list(range(n_s)),
                       unseen_classes=list(range(n_s, n_s + len(self.split.unseen_classes))))

    def to_external(self):
        return {v: k for k, v in self.to_internal.items()}


def _stage(name):
    def wrap(fn):
        def run(*args, **kw):
            try:
                return fn(*args, **kw)
            except StageError:
                raise
            except AnchorGzslError as exc:
                raise StageError(name, exc) from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


def resolve_split(cfg, split=None):
    base = split if split is not None else SplitSpec()
    spec = SplitSpec(
        seen_classes=list(cfg.split.seen_classes or base.seen_classes),
        unseen_classes=list(cfg.split.unseen_classes or base.unseen_classes),
        train_frac=cfg.split.train_frac,
        test_frac=cfg.split.test_frac,
        seed=cfg.seed,
    )
    return spec.validate()


@_stage("split")
def prepare(cfg, data, split=None, indices=None):
    cfg.validate()
    split = resolve_split(cfg, split)
    seen, unseen = sorted(split.seen_classes), sorted(split.unseen_classes)
    to_internal = {c: i for i, c in enumerate(seen + unseen)}
    if indices is None:
        rng = make_rng(split.seed, "split")
        s_tr, s_te = stratified_split(data.labels, seen, split.train_frac, split.test_frac, rng)
        u_tr, u_te = stratified_split(data.labels, unseen, split.train_frac, split.test_frac, rng)
        indices = {"seen_train": s_tr, "seen_test": s_te, "unseen_train": u_tr, "unseen_test": u_te}
    indices = {k: np.asarray(v, dtype=int) for k, v in indices.items()}
    return PipelineState(cfg, data, split, to_internal, indices)


@_stage("cluster")
def stage_cluster(state):
    cfg = state.cfg
    Xs, ys = state.rows("seen_train")
    Xu, _ = state.rows("unseen_train")
    bank = fit_seen_prototypes(Xs, ys, cfg.cluster, make_rng(cfg.seed, "cluster-seen"))
    state.bank = fit_unseen_prototypes(Xu, bank, cfg.cluster, make_rng(cfg.seed, "cluster-unseen"),
                                       n_unseen=len(state.split.unseen_classes), X_seen=Xs, y_seen=ys)
    return state.bank


@_stage("train-classifier")
def stage_classifier(state):
    Xs, ys = state.rows("seen_train")
    state.clf = pretrain_classifier(Xs, ys, state.cfg.classifier, make_rng(state.cfg.seed, "classifier"))
    return state.clf


@_stage("train-gan")
def stage_gan(state):
    cfg = state.cfg
    Xs, ys = state.rows("seen_train")
    state.G, state.D, _ = train_gan(Xs, ys, state.bank, state.clf, cfg.gan, make_rng(cfg.seed, "gan"),
                                    attributes=state.data.attributes)
    return state.G, state.D


@_stage("synth")
def stage_synth(state, n_per_class=None):
    cfg = state.cfg
    n = cfg.synth_per_class if n_per_class is None else n_per_class
    state.synth = synthesize_dataset(state.G, state.bank.class_ids(), n, cfg.gan.conditioning_mode,
                                     state.bank, make_rng(cfg.seed, "synth"), state.data.attributes)
    return state.synth


@_stage("eval")
def stage_eval(state):
    cfg = state.cfg
    Xs, ys = state.rows("seen_train")
    Xg, yg = state.synth
    seen_ids = set(state.bank.seen_class_ids())
    is_seen = np.isin(yg, sorted(seen_ids))
    X, y, _ = assemble_training_set((Xs, ys), (Xg[is_seen], yg[is_seen]), (Xg[~is_seen], yg[~is_seen]))
    state.final = train_softmax(X, y, cfg.softmax, make_rng(cfg.seed, "softmax"))
    state.report = evaluate_gzsl(state.final, *state.rows("seen_test"), *state.rows("unseen_test"),
                                 state.internal_split)
    return state.report


def report_dict(state):
    """Report JSON document with class ids translated back to dataset labels."""
    back = state.to_external()
    doc = state.report.to_dict(config_digest=state.cfg.digest(), seed=int(state.cfg.seed))
    doc["per_class"] = {str(back[int(k)]): v for k, v in doc["per_class"].items()}
    doc["classes"] = [back[c] for c in doc["classes"]]
    return doc


def report_json(state):
    return json.dumps(report_dict(state), sort_keys=True, indent=2)


def persist(state, out_dir, fmt="csv"):
    os.makedirs(out_dir, exist_ok=True)
    p = lambda name: os.path.join(out_dir, name)
    with open(p("config.json"), "w") as fh:
        fh.write(state.cfg.to_json())
    write_split(state, p("split.json"))
    if state.bank is not None:
        with open(p("bank.json"), "w") as fh:
            json.dump(state.bank.to_dict(), fh)
    if state.clf is not None:
        with open(p("classifier.json"), "w") as fh:
            json.dump(state.clf.to_dict(), fh)
    if state.G is not None:
        extra = {"gan_config": asdict(state.cfg.gan)}
        save_mlp(state.G, p("generator.json"), extra)
        save_mlp(state.D, p("critic.json"), extra)
    if state.synth is not None:
        X, y = state.synth
        back = state.to_external()
        ext = np.array([back.get(int(c), int(c)) for c in y], dtype=int)
        save_features(FeatureDataset(X.reshape(-1, state.data.dim), ext, n_classes=state.data.n_classes),
                      p("synth." + ("csv" if fmt == "csv" else "fvec")), fmt)
    if state.final is not None:
        with open(p("softmax.json"), "w") as fh:
            json.dump(state.final.to_dict(), fh)
    if state.report is not None:
        with open(p("report.json"), "w") as fh:
            fh.write(report_json(state))


def write_split(state, path):
    doc = {"split": asdict(state.split), "indices": {k: v.tolist() for k, v in state.indices.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_split(path):
    with open(path) as fh:
        doc = json.load(fh)
    if "split" not in doc:
        return SplitSpec(**doc), None
    return SplitSpec(**doc["split"]), doc.get("indices")


def run_pipeline(cfg, data, split=None, out_dir=None, fmt="csv"):
    """Run every stage; returns the populated :class:`PipelineState`."""
    state = prepare(cfg, data, split)
    stage_cluster(state)
    stage_classifier(state)
    stage_gan(state)
    stage_synth(state)
    stage_eval(state)
    if out_dir:
        persist(state, out_dir, fmt)
    return state


def sweep_augmentation_factor(cfg, data, factors, split=None, out_dir=None):
    """Retrain and evaluate the final classifier per synthetic-samples-per-class factor.

    The generator is trained once and reused. Returns ``[(factor, report), ...]``
    and, with ``out_dir``, writes ``sweep_aug.csv``.
    """
    if any(f < 0 for f in factors):
        raise ConfigError("augmentation factors must be >= 0")
    state = prepare(cfg, data, split)
    stage_cluster(state)
    stage_classifier(state)
    stage_gan(state)
    results = []
    for f in factors:
        stage_synth(state, int(f))
        results.append((int(f), stage_eval(state)))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_rows(os.path.join(out_dir, "sweep_aug.csv"), ["factor"], [[f] for f, _ in results],
                    [r for _, r in results])
    return results


def hyper_values(param):
    if param not in HYPER_PRESETS:
        raise ConfigError(f"no sweep preset for {param!r}; choose from {sorted(HYPER_PRESETS)}")
    _, _, lo, hi, step = HYPER_PRESETS[param]
    n = int(round((hi - lo) / step)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def sweep_hyper(cfg, data, param, values=None, split=None, out_dir=None):
    """One full pipeline run per value of a single weight or threshold."""
    if param not in HYPER_PRESETS:
        raise ConfigError(f"no sweep preset for {param!r}; choose from {sorted(HYPER_PRESETS)}")
    section, key, *_ = HYPER_PRESETS[param]
    values = hyper_values(param) if values is None else list(values)
    results = []
    for v in values:
        sub = replace(getattr(cfg, section), **{key: v})
        run_cfg = replace(cfg, **{section: sub})
        results.append((v, run_pipeline(run_cfg, data, split).report))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_rows(os.path.join(out_dir, f"sweep_{param}.csv"), [param], [[v] for v, _ in results],
                    [r for _, r in results])
    return results


def _write_rows(path, lead, lead_rows, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(lead + ["acc_s", "acc_u", "h", "acc_u_matched", "h_matched"])
        for row, r in zip(lead_rows, reports):
            w.writerow(row + [repr(r.acc_s), repr(r.acc_u), repr(r.h), repr(r.acc_u_matched), repr(r.h_matched)])
