"""GZSL training-set assembly, final classifier and metrics.

Accuracies are fractions internally; multiply by 100 only when printing
alongside published tables.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (ConfigError, DimensionMismatch, EmptyClass, MissingClassInTest, UnknownClass,
                     UnknownLabel)
from .synthesis import condition_matrix, fit_softmax, generate


@dataclass
class SplitSpec:
    seen_classes: list = field(default_factory=list)
    unseen_classes: list = field(default_factory=list)
    train_frac: float = 0.8
    test_frac: float = 0.2
    seed: int = 0

    def validate(self, require_classes=True):
        if set(self.seen_classes) & set(self.unseen_classes):
            raise ConfigError("seen and unseen classes overlap")
        if require_classes and not (self.seen_classes and self.unseen_classes):
            raise ConfigError("GZSL needs nonempty seen and unseen class sets")
        if self.train_frac < 0 or self.test_frac < 0 or self.train_frac + self.test_frac > 1 + 1e-12:
            raise ConfigError("train/test fractions must be nonnegative and sum to at most 1")
        return self


@dataclass
class EvalReport:
    per_class_acc: dict
    acc_s: float
    acc_u: float
    h: float
    acc_u_matched: float
    h_matched: float
    confusion: list
    classes: list
    n_test_s: int
    n_test_u: int

    def to_dict(self, config_digest=None, seed=None):
        return {
            "acc_s": self.acc_s,
            "acc_u": self.acc_u,
            "h": self.h,
            "acc_u_matched": self.acc_u_matched,
            "h_matched": self.h_matched,
            "per_class": {str(k): v for k, v in sorted(self.per_class_acc.items())},
            "confusion": self.confusion,
            "classes": self.classes,
            "n_test_s": self.n_test_s,
            "n_test_u": self.n_test_u,
            "config_digest": config_digest,
            "seed": seed,
        }


def stratified_split(labels, classes, train_frac, test_frac, rng):
    """Per-class shuffled split; returns ``(train_idx, test_idx)`` in class order."""
    labels = np.asarray(labels)
    train, test = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_tr = int(round(train_frac * idx.size))
        n_te = min(int(round(test_frac * idx.size)), idx.size - n_tr)
        train.append(idx[:n_tr])
        test.append(idx[n_tr:n_tr + n_te])
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=int)
    return cat(train), cat(test)


def synthesize_dataset(G, class_ids, n_per_class, mode, bank, rng, attributes=None):
    """``n_per_class`` generated rows for each class, grouped by class."""
    class_ids = [int(c) for c in class_ids]
    if n_per_class == 0 or not class_ids:
        return np.zeros((0, G.n_out)), np.zeros(0, dtype=int)
    labels = np.repeat(np.array(class_ids, dtype=int), n_per_class)
    try:
        E = condition_matrix(labels, mode, bank, attributes)
    except UnknownLabel as exc:
        raise UnknownClass(str(exc)) from None
    Z = rng.standard_normal((labels.size, G.n_in - E.shape[1]))
    return generate(G, E, Z), labels


def assemble_training_set(real, synth_seen, synth_unseen):
    """Concatenate ``(X, y)`` blocks; returns ``(X, y, provenance)``.

    ``provenance`` tags each row ``"real"``, ``"synth_seen"`` or ``"synth_unseen"``.
    """
    blocks = [(real, "real"), (synth_seen, "synth_seen"), (synth_unseen, "synth_unseen")]
    dims = {np.asarray(X).shape[1] for (X, y), _ in blocks if len(y)}
    if len(dims) > 1:
        raise DimensionMismatch(f"feature dimensions differ across blocks: {sorted(dims)}")
    d = dims.pop() if dims else np.asarray(real[0]).shape[1]
    X = np.concatenate([np.asarray(X, dtype=np.float64).reshape(-1, d) for (X, _), _ in blocks])
    y = np.concatenate([np.asarray(y, dtype=int).reshape(-1) for (_, y), _ in blocks])
    prov = np.concatenate([np.full(len(y), tag) for (_, y), tag in blocks])
    return X, y, prov


def train_softmax(X, labels, cfg, rng, classes=None):
    """Final GZSL classifier over ``classes`` (default: the labels present)."""
    classes = np.unique(labels) if classes is None else classes
    return fit_softmax(X, labels, classes, cfg, rng)


def predict(clf, X):
    """Arg-max class; ties go to the smallest class id."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != clf.net.n_in:
        raise DimensionMismatch(f"classifier expects {clf.net.n_in} features, got {X.shape[1]}")
    return np.asarray(clf.classes)[np.argmax(clf.logits(X), axis=1)]


def per_class_accuracy(preds, labels, classes):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(classes) == 0:
        raise EmptyClass("class set is empty")
    out = {}
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise EmptyClass(f"class {c} has no samples")
        out[int(c)] = float(np.mean(preds[mask] == c))
    return out


def harmonic_mean(acc_s, acc_u):
    if acc_s + acc_u == 0:
        return 0.0
    return 2.0 * acc_u * acc_s / (acc_u + acc_s)


def _mean(values):
    return float(sum(values) / len(values))


def evaluate_gzsl(clf, X_s, y_s, X_u, y_u, split):
    """Seen (S) and unseen (U) per-class accuracies from one classifier.

    Unseen predictions carry anonymous cluster ids, so ``acc_u`` takes them
    at face value while ``acc_u_matched`` first maps predicted non-seen ids
    onto the true unseen labels by an oracle Hungarian matching on this
    test set.
    """
    seen, unseen = [int(c) for c in split.seen_classes], [int(c) for c in split.unseen_classes]
    for c, ys in [(c, y_s) for c in seen] + [(c, y_u) for c in unseen]:
        if not np.any(np.asarray(ys) == c):
            raise MissingClassInTest(f"class {c} has no test samples")
    p_s, p_u = predict(clf, X_s), predict(clf, X_u)
    acc_seen = per_class_accuracy(p_s, y_s, seen)
    acc_unseen = per_class_accuracy(p_u, y_u, unseen)
    acc_s, acc_u = _mean(acc_seen.values()), _mean(acc_unseen.values())

    candidates = [int(c) for c in clf.classes if int(c) not in seen]
    mapped = np.asarray(p_u).copy()
    if candidates:
        M = np.array([[np.sum((np.asarray(y_u) == t) & (np.asarray(p_u) == p)) for p in candidates]
                      for t in unseen])
        rows, cols = linear_sum_assignment(-M)
        to_true = {candidates[c]: unseen[r] for r, c in zip(rows, cols)}
        mapped = np.array([to_true.get(int(p), -1 - int(p)) if int(p) in candidates else int(p)
                           for p in np.asarray(p_u).tolist()], dtype=int)
        acc_u_matched = _mean(per_class_accuracy(mapped, y_u, unseen).values())
    else:
        acc_u_matched = 0.0

    universe = sorted(set(seen) | set(unseen) | {int(c) for c in clf.classes})
    pos = {c: i for i, c in enumerate(universe)}
    confusion = np.zeros((len(universe), len(universe)), dtype=int)
    for t, p in zip(np.concatenate([y_s, y_u]).tolist(), np.concatenate([p_s, p_u]).tolist()):
        confusion[pos[int(t)], pos[int(p)]] += 1
    return EvalReport(
        per_class_acc={**acc_seen, **acc_unseen},
        acc_s=acc_s,
        acc_u=acc_u,
        h=harmonic_mean(acc_s, acc_u),
        acc_u_matched=acc_u_matched,
        h_matched=harmonic_mean(acc_s, acc_u_matched),
        confusion=confusion.tolist(),
        classes=universe,
        n_test_s=int(len(y_s)),
        n_test_u=int(len(y_u)),
    )
