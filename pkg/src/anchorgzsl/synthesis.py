"""Anchor-guided conditional WGAN-GP feature synthesis.

The generator maps ``[e; z]`` to a feature vector, the critic scores
``[x; e]``. Besides the Wasserstein term, the generator is pulled toward
its class anchor (cosine distance, all classes) and toward what a frozen
seen-class classifier predicts (seen classes only).
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, DimensionMismatch, EmptyDataset, MissingAttributeTable,
                     UnknownClass, UnknownLabel, UnseenLabelInClLoss, ZeroVector)
from .nn import (AdamState, Mlp, gradient_penalty, init_mlp, leaky, mlp_backward, mlp_forward,
                 mlp_from_dict, mlp_to_dict)
from .numerics import ZERO_NORM, cosine_grad, log_softmax

log = logging.getLogger(__name__)

CONDITIONING_MODES = ("one_hot", "anchor", "attribute")


@dataclass
class GanConfig:
    lambda_gp: float = 10.0
    lambda_cl: float = 0.6
    lambda3: float = 0.9
    d_z: int = 128
    critic_steps: int = 5
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    conditioning_mode: str = "one_hot"
    g_hidden: list = field(default_factory=lambda: [2000, 1000])
    d_hidden: list = field(default_factory=lambda: [1000])
    g_output: str = "auto"
    leaky_slope: float = 0.2
    init_std: float = 0.01
    gp_mode: str = "analytic"

    def validate(self):
        checks = [
            (self.lambda_gp >= 0 and self.lambda_cl >= 0 and self.lambda3 >= 0, "loss weights must be >= 0"),
            (self.critic_steps >= 1, "critic_steps must be >= 1"),
            (self.d_z >= 1 and self.batch_size >= 1 and self.epochs >= 0, "d_z, batch_size >= 1; epochs >= 0"),
            (self.lr > 0, "lr must be positive"),
            (all(0 < b < 1 for b in self.betas), "Adam betas must lie in (0, 1)"),
            (self.conditioning_mode in CONDITIONING_MODES, f"conditioning_mode must be one of {CONDITIONING_MODES}"),
            (self.g_output in ("auto", "relu", "linear"), "g_output must be auto, relu or linear"),
            (self.gp_mode in ("analytic", "fd"), "gp_mode must be analytic or fd"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


@dataclass
class SoftmaxConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    tol: float = 1e-6

    def validate(self):
        if not (self.lr > 0 and self.epochs >= 1 and self.batch_size >= 1 and self.tol >= 0):
            raise ConfigError("softmax config: lr > 0, epochs >= 1, batch_size >= 1, tol >= 0")
        return self


@dataclass
class ConditioningVector:
    e: np.ndarray
    class_id: int
    mode: str


@dataclass
class SoftmaxClassifier:
    """Linear softmax classifier; output column ``j`` scores ``classes[j]``."""

    net: Mlp
    classes: list

    def logits(self, X):
        return mlp_forward(self.net, X)[0]

    def column_of(self, labels, error=UnknownClass):
        col = {c: j for j, c in enumerate(self.classes)}
        try:
            return np.array([col[int(y)] for y in np.asarray(labels).tolist()], dtype=int)
        except KeyError as exc:
            raise error(f"label {exc.args[0]} outside classifier classes") from None

    def to_dict(self):
        return {"classes": [int(c) for c in self.classes], "net": mlp_to_dict(self.net)}

    @classmethod
    def from_dict(cls, doc):
        return cls(mlp_from_dict(doc["net"]), [int(c) for c in doc["classes"]])


def make_condition(class_id, mode, bank=None, attributes=None):
    """Conditioning vector for ``class_id``.

    ``one_hot`` has length ``bank.n_total`` with the one at the class's
    prototype index; ``anchor`` is the class's prototype; ``attribute`` is
    row ``class_id`` of ``attributes``.
    """
    if mode == "attribute":
        if attributes is None:
            raise MissingAttributeTable("attribute conditioning needs an attribute table")
        attributes = np.asarray(attributes, dtype=np.float64)
        if not 0 <= int(class_id) < attributes.shape[0]:
            raise UnknownClass(f"class {class_id} has no attribute row")
        return ConditioningVector(attributes[int(class_id)].copy(), int(class_id), mode)
    if mode not in ("one_hot", "anchor"):
        raise ConfigError(f"unknown conditioning mode {mode!r}")
    if bank is None:
        raise ConfigError(f"{mode} conditioning needs a prototype bank")
    try:
        idx = bank.index_of(class_id)
    except UnknownLabel:
        raise UnknownClass(f"class {class_id} is not in the prototype bank") from None
    if mode == "one_hot":
        e = np.zeros(bank.n_total)
        e[idx] = 1.0
    else:
        e = bank.prototypes[idx].copy()
    return ConditioningVector(e, int(class_id), mode)


def condition_matrix(class_ids, mode, bank=None, attributes=None):
    ids = list(np.asarray(class_ids).tolist())
    cache = {c: make_condition(c, mode, bank, attributes).e for c in sorted(set(ids))}
    if not ids:
        return np.zeros((0, condition_dim(mode, bank, attributes)))
    return np.stack([cache[c] for c in ids])


def condition_dim(mode, bank=None, attributes=None):
    if mode == "one_hot":
        return bank.n_total
    if mode == "anchor":
        return bank.dim
    if attributes is None:
        raise MissingAttributeTable("attribute conditioning needs an attribute table")
    return np.asarray(attributes).shape[1]


def generate(G, e, z):
    """Synthesize features for conditioning ``e`` and noise ``z`` (vector or batch)."""
    e, z = np.asarray(e, dtype=np.float64), np.asarray(z, dtype=np.float64)
    single = e.ndim == 1
    E, Z = np.atleast_2d(e), np.atleast_2d(z)
    if E.shape[0] != Z.shape[0] or E.shape[1] + Z.shape[1] != G.n_in:
        raise DimensionMismatch(f"generator expects {G.n_in} inputs, got {E.shape[1]} + {Z.shape[1]}")
    out = mlp_forward(G, np.hstack([E, Z]))[0]
    return out[0] if single else out


def critic_loss(D, X_real, E_real, X_fake, E_fake, lambda_gp, rng, gp_mode="analytic"):
    """Critic objective ``E[D(fake)] - E[D(real)] + lambda_gp * E[(||grad D(x_hat)|| - 1)^2]``.

    ``x_hat = a * x_real + (1 - a) * x_fake`` with ``a ~ U(0, 1)`` per row,
    scored under the real row's conditioning. Returns
    ``(loss, D-parameter grads, penalty, n_skipped)``; rows whose
    interpolate gradient vanishes keep their penalty but add no gradient.
    """
    X_real, X_fake = np.asarray(X_real, dtype=np.float64), np.asarray(X_fake, dtype=np.float64)
    if X_real.shape != X_fake.shape:
        raise DimensionMismatch("real and fake batches must have equal shape")
    B, d = X_real.shape
    out_r, cache_r = mlp_forward(D, np.hstack([X_real, E_real]))
    out_f, cache_f = mlp_forward(D, np.hstack([X_fake, E_fake]))
    g_r, _ = mlp_backward(D, cache_r, np.full((B, 1), -1.0 / B))
    g_f, _ = mlp_backward(D, cache_f, np.full((B, 1), 1.0 / B))
    alpha = rng.random((B, 1))
    X_hat = alpha * X_real + (1.0 - alpha) * X_fake
    penalty, g_p, skipped = gradient_penalty(D, np.hstack([X_hat, E_real]), 1.0, n_feat=d, mode=gp_mode)
    loss = float(out_f.mean() - out_r.mean() + lambda_gp * penalty)
    grads = [a + b + lambda_gp * c for a, b, c in zip(g_r, g_f, g_p)]
    return loss, grads, penalty, skipped


def _anchor_space(bank, X):
    if bank.head is None:
        return X, None
    return mlp_forward(bank.head, X)


def ssl3_batch(X, bank, class_ids):
    """Mean cosine distance of rows of ``X`` to their class anchors, with ``d/dX``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    try:
        idx = np.array([bank.index_of(c) for c in np.asarray(class_ids).tolist()], dtype=int)
    except UnknownLabel as exc:
        raise UnknownClass(str(exc)) from None
    Y, cache = _anchor_space(bank, X)
    if np.any(np.linalg.norm(Y, axis=1) < ZERO_NORM):
        raise ZeroVector("generated feature has zero norm")
    cos, dcos = cosine_grad(bank.prototypes[idx], Y)
    n = X.shape[0]
    dY = -dcos / n
    dX = dY if cache is None else mlp_backward(bank.head, cache, dY)[1]
    return float(np.mean(1.0 - cos)), dX


def ssl3_loss(x, bank, class_id):
    """``1 - cos(x, c_y)`` and its gradient with respect to ``x``."""
    value, grad = ssl3_batch(np.asarray(x, dtype=np.float64)[None, :], bank, [class_id])
    return value, grad[0]


def cl_loss(clf, X, labels):
    """Mean negative log-likelihood of ``labels`` under a frozen classifier.

    Returns ``(value, d/dX)``; the classifier itself receives no update.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cols = clf.column_of(labels, error=UnseenLabelInClLoss)
    logits, cache = mlp_forward(clf.net, X)
    logp = log_softmax(logits)
    n = X.shape[0]
    value = float(-np.mean(logp[np.arange(n), cols]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), cols] -= 1.0
    _, dX = mlp_backward(clf.net, cache, dlogits / n)
    return value, dX


def generator_loss(G, D, clf, bank, class_ids, Z, cfg, attributes=None):
    """Generator objective on one batch of ``(class_id, z)``.

    ``-E[D(G(e, z), e)] + lambda_cl * CL(seen rows) + lambda3 * SSL3(all rows)``.
    Returns ``(loss, G-parameter grads, parts)`` where ``parts`` holds the
    unweighted terms.
    """
    class_ids = np.asarray(class_ids)
    E = condition_matrix(class_ids, cfg.conditioning_mode, bank, attributes)
    X_fake, cache_g = mlp_forward(G, np.hstack([E, Z]))
    B, d = X_fake.shape
    out, cache_d = mlp_forward(D, np.hstack([X_fake, E]))
    adv = -float(out.mean())
    _, dIn = mlp_backward(D, cache_d, np.full((B, 1), -1.0 / B))
    dX = dIn[:, :d].copy()
    parts = {"adv": adv, "cl": 0.0, "ssl3": 0.0}
    seen = set(bank.seen_class_ids())
    mask = np.array([int(c) in seen for c in class_ids.tolist()], dtype=bool)
    if cfg.lambda_cl > 0 and clf is not None and mask.any():
        parts["cl"], dcl = cl_loss(clf, X_fake[mask], class_ids[mask])
        dX[mask] += cfg.lambda_cl * dcl
    if cfg.lambda3 > 0:
        parts["ssl3"], ds3 = ssl3_batch(X_fake, bank, class_ids)
        dX += cfg.lambda3 * ds3
    grads, _ = mlp_backward(G, cache_g, dX)
    loss = adv + cfg.lambda_cl * parts["cl"] + cfg.lambda3 * parts["ssl3"]
    return loss, grads, parts


def softmax_nll(clf, X, labels):
    """Mean NLL over ``(X, labels)`` and its gradient with respect to the classifier."""
    cols = clf.column_of(labels)
    logits, cache = mlp_forward(clf.net, X)
    logp = log_softmax(logits)
    n = X.shape[0]
    dlogits = np.exp(logp)
    dlogits[np.arange(n), cols] -= 1.0
    grads, _ = mlp_backward(clf.net, cache, dlogits / n)
    return float(-np.mean(logp[np.arange(n), cols])), grads


def fit_softmax(X, labels, classes, cfg, rng, init_std=0.01):
    """Linear softmax classifier trained with Adam until the full-data loss
    changes by less than ``cfg.tol`` across an epoch, or ``cfg.epochs`` run out."""
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.shape[0] == 0:
        raise EmptyDataset("no training rows")
    classes = sorted(int(c) for c in classes)
    clf = SoftmaxClassifier(init_mlp([X.shape[1], len(classes)], ["linear"], rng, std=init_std), classes)
    clf.column_of(labels)
    params = clf.net.params()
    opt = AdamState(params, lr=cfg.lr)
    n = X.shape[0]
    prev = softmax_nll(clf, X, labels)[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            _, grads = softmax_nll(clf, X[b], labels[b])
            opt.step(params, grads)
        cur = softmax_nll(clf, X, labels)[0]
        if abs(prev - cur) < cfg.tol:
            log.debug("softmax converged after %d epochs (loss %.3g)", epoch + 1, cur)
            break
        prev = cur
    return clf


def pretrain_classifier(X, labels, cfg, rng):
    """Seen-class softmax classifier used frozen inside the generator loss."""
    return fit_softmax(X, labels, np.unique(labels), cfg, rng)


def resolve_output(cfg, X):
    if cfg.g_output != "auto":
        return cfg.g_output
    return "relu" if np.min(X) >= 0 else "linear"


def build_nets(cfg, d, e_dim, rng, output="linear"):
    act = leaky(cfg.leaky_slope)
    g_dims = [e_dim + cfg.d_z] + list(cfg.g_hidden) + [d]
    d_dims = [d + e_dim] + list(cfg.d_hidden) + [1]
    G = init_mlp(g_dims, [act] * len(cfg.g_hidden) + [output], rng, std=cfg.init_std)
    D = init_mlp(d_dims, [act] * len(cfg.d_hidden) + ["linear"], rng, std=cfg.init_std)
    return G, D


def train_gan(X, labels, bank, clf, cfg, rng, attributes=None):
    """Alternating WGAN-GP training.

    Each generator update follows ``critic_steps`` critic updates. Critic
    real rows come from the seen training data; fake rows and generator
    batches draw classes uniformly over every prototype class, so unseen
    classes are shaped only by the adversarial and anchor terms.
    Returns ``(G, D, history)``.
    """
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = X.shape
    if n == 0:
        raise EmptyDataset("no real seen features")
    e_dim = condition_dim(cfg.conditioning_mode, bank, attributes)
    G, D = build_nets(cfg, d, e_dim, rng, resolve_output(cfg, X))
    g_params, d_params = G.params(), D.params()
    g_opt = AdamState(g_params, lr=cfg.lr, betas=cfg.betas)
    d_opt = AdamState(d_params, lr=cfg.lr, betas=cfg.betas)
    E_real_all = condition_matrix(labels, cfg.conditioning_mode, bank, attributes)
    all_classes = np.array(bank.class_ids())
    B = min(cfg.batch_size, n)
    iters = math.ceil(n / B)
    history = []
    skipped = 0
    for epoch in range(cfg.epochs):
        for _ in range(iters):
            for _ in range(cfg.critic_steps):
                pick = rng.integers(0, n, size=B)
                fake_ids = all_classes[rng.integers(0, len(all_classes), size=B)]
                E_fake = condition_matrix(fake_ids, cfg.conditioning_mode, bank, attributes)
                X_fake = generate(G, E_fake, rng.standard_normal((B, cfg.d_z)))
                d_loss, d_grads, _, sk = critic_loss(D, X[pick], E_real_all[pick], X_fake, E_fake,
                                                     cfg.lambda_gp, rng, cfg.gp_mode)
                skipped += sk
                d_opt.step(d_params, d_grads)
            gen_ids = all_classes[rng.integers(0, len(all_classes), size=B)]
            g_loss, g_grads, parts = generator_loss(G, D, clf, bank, gen_ids,
                                                    rng.standard_normal((B, cfg.d_z)), cfg, attributes)
            g_opt.step(g_params, g_grads)
        history.append({"epoch": epoch, "d_loss": d_loss, "g_loss": g_loss, **parts})
        log.debug("gan epoch %d d_loss %.4f g_loss %.4f", epoch, d_loss, g_loss)
    if skipped:
        log.info("gradient penalty skipped %d interpolates with vanishing gradient", skipped)
    return G, D, history
