"""Anchor discovery by swapped-prediction online clustering.

Phase one clusters seen-class features into ``n_seen`` prototypes with the
swapped-prediction objective and Sinkhorn codes. Phase two freezes those
and fits ``n_unseen`` further prototypes on unlabeled unseen-class
features, adding a capped seen/unseen prototype-similarity term and a
floored margin term on seen samples.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DegenerateClustering, DimensionMismatch, UnknownLabel
from .nn import AdamState, init_mlp, leaky, mlp_apply, mlp_backward, mlp_forward, mlp_from_dict, mlp_to_dict
from .numerics import cosine_grad, log_softmax, logsumexp, normalize_rows

log = logging.getLogger(__name__)


@dataclass
class ClusterConfig:
    tau: float = 0.1
    eps_sinkhorn: float = 0.05
    sinkhorn_iters: int = 3
    sigma1: float = 0.15
    sigma2: float = 0.25
    lambda1: float = 1.1
    lambda2: float = 0.7
    aug_noise_std: float = 0.05
    aug_mask_frac: float = 0.1
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-3
    proj_dims: list = field(default_factory=list)
    ssl2_form: str = "paper"

    def validate(self):
        checks = [
            (self.tau > 0, "tau must be positive"),
            (self.eps_sinkhorn > 0, "eps_sinkhorn must be positive"),
            (self.sinkhorn_iters >= 1, "sinkhorn_iters must be >= 1"),
            (0 < self.sigma1 < 1, "sigma1 must lie in (0, 1)"),
            (0 < self.sigma2 < 1, "sigma2 must lie in (0, 1)"),
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambda1/lambda2 must be >= 0"),
            (self.aug_noise_std >= 0, "aug_noise_std must be >= 0"),
            (0 <= self.aug_mask_frac < 1, "aug_mask_frac must lie in [0, 1)"),
            (self.batch_size >= 1 and self.epochs >= 0, "batch_size >= 1 and epochs >= 0"),
            (self.lr > 0, "lr must be positive"),
            (self.ssl2_form in ("paper", "hinge"), "ssl2_form must be 'paper' or 'hinge'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


@dataclass
class PrototypeBank:
    """Unit-norm anchors; rows ``[0, n_seen)`` are the seen block.

    ``class_map`` maps seen prototype index to class id. Unseen prototype
    ``j`` carries the synthetic class id ``j``.
    """

    prototypes: np.ndarray
    n_seen: int
    n_unseen: int = 0
    class_map: dict = field(default_factory=dict)
    seen_frozen: bool = False
    head: object = None

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.shape[0] != self.n_seen + self.n_unseen:
            raise DimensionMismatch("prototype count must equal n_seen + n_unseen")
        if sorted(self.class_map) != list(range(self.n_seen)):
            raise ValueError("class_map must cover exactly the seen block")
        if len(set(self.class_map.values())) != self.n_seen:
            raise ValueError("class_map must be one-to-one")
        if set(self.class_map.values()) & set(range(self.n_seen, self.n_total)):
            raise ValueError("seen class ids collide with synthetic unseen ids")

    @property
    def n_total(self):
        return self.n_seen + self.n_unseen

    @property
    def dim(self):
        return self.prototypes.shape[1]

    @property
    def seen(self):
        return self.prototypes[:self.n_seen]

    @property
    def unseen(self):
        return self.prototypes[self.n_seen:]

    def class_ids(self):
        return [self.class_map[i] for i in range(self.n_seen)] + list(range(self.n_seen, self.n_total))

    def seen_class_ids(self):
        return [self.class_map[i] for i in range(self.n_seen)]

    def index_of(self, class_id):
        ids = self.class_ids()
        try:
            return ids.index(int(class_id))
        except ValueError:
            raise UnknownLabel(f"class {class_id} has no prototype") from None

    def anchor(self, class_id):
        return self.prototypes[self.index_of(class_id)]

    def embed(self, X):
        """Map features into anchor space (projection head, then unit sphere)."""
        Y = X if self.head is None else mlp_apply(self.head, X)
        return normalize_rows(Y)[0]

    def to_dict(self):
        return {
            "n_seen": self.n_seen,
            "n_unseen": self.n_unseen,
            "class_map": {str(k): int(v) for k, v in self.class_map.items()},
            "seen_frozen": self.seen_frozen,
            "prototypes": self.prototypes.tolist(),
            "head": None if self.head is None else mlp_to_dict(self.head),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            prototypes=np.array(doc["prototypes"], dtype=np.float64).reshape(doc["n_seen"] + doc["n_unseen"], -1),
            n_seen=doc["n_seen"],
            n_unseen=doc["n_unseen"],
            class_map={int(k): int(v) for k, v in doc["class_map"].items()},
            seen_frozen=doc["seen_frozen"],
            head=None if doc.get("head") is None else mlp_from_dict(doc["head"]),
        )


def augment_features(X, cfg, rng):
    """Two independently perturbed unit-norm views of each row of ``X``.

    A view is ``x + N(0, aug_noise_std^2)`` with exactly
    ``round(aug_mask_frac * d)`` coordinates zeroed, then renormalized.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    n_mask = int(round(cfg.aug_mask_frac * d))
    views = []
    for _ in range(2):
        V = X + cfg.aug_noise_std * rng.standard_normal((n, d)) if cfg.aug_noise_std > 0 else X.copy()
        if n_mask:
            cols = np.argsort(rng.random((n, d)), axis=1)[:, :n_mask]
            np.put_along_axis(V, cols, 0.0, axis=1)
        views.append(normalize_rows(V)[0])
    return views[0], views[1]


def sinkhorn_assign(scores, eps=0.05, iters=3, tol=None):
    """Entropic assignment of ``B`` samples to ``K`` prototypes.

    ``scores`` is ``K x B``. Returns ``Q = diag(u) exp(scores/eps) diag(v)``
    after ``iters`` rounds of row then column rescaling toward the uniform
    marginals ``1/K`` and ``1/B``; the last step rescales columns, so column
    sums are exact. With ``tol`` set, iteration stops early once an entire
    round moves no entry by more than ``tol``. Runs in the log domain.
    """
    if not eps > 0 or iters < 1:
        raise ValueError("need eps > 0 and iters >= 1")
    S = np.asarray(scores, dtype=np.float64)
    K, B = S.shape
    logQ = S / eps
    logQ = logQ - logsumexp(logQ)
    log_k, log_b = np.log(K), np.log(B)
    prev = None
    for _ in range(iters):
        logQ = logQ - logsumexp(logQ, axis=1, keepdims=True) - log_k
        logQ = logQ - logsumexp(logQ, axis=0, keepdims=True) - log_b
        if tol is not None:
            Q = np.exp(logQ)
            if prev is not None and np.max(np.abs(Q - prev)) <= tol:
                break
            prev = Q
    return np.exp(logQ)


def _cross_entropy(Z, C, codes, tau):
    """Soft-label cross-entropy of tempered prototype scores, per row.

    Returns ``(losses, dZ, dC)`` for the *sum* over rows.
    """
    logits = Z @ C.T / tau
    logp = log_softmax(logits)
    losses = -np.sum(codes * logp, axis=1)
    dlogits = np.exp(logp) * codes.sum(axis=1, keepdims=True) - codes
    return losses, dlogits @ C / tau, dlogits.T @ Z / tau


def swapped_loss(Z_t, Z_s, C, Q_t, Q_s, tau=0.1):
    """Batch swapped-prediction loss.

    ``Z_t``/``Z_s`` are ``B x d`` unit rows of the two views, ``C`` is
    ``K x d`` and ``Q_t``/``Q_s`` are the ``K x B`` assignment matrices of
    the respective views, used as constants. Each view predicts the other
    view's code; the result is averaged over the batch.

    Returns ``(loss, dC, dZ_t, dZ_s)``.
    """
    Z_t, Z_s, C = (np.asarray(a, dtype=np.float64) for a in (Z_t, Z_s, C))
    if Z_t.shape != Z_s.shape or Z_t.shape[1] != C.shape[1]:
        raise DimensionMismatch("view / prototype dimensions disagree")
    B = Z_t.shape[0]
    if Q_t.shape != (C.shape[0], B) or Q_s.shape != (C.shape[0], B):
        raise DimensionMismatch("assignment matrices must be K x B")
    codes_t, codes_s = Q_t.T * B, Q_s.T * B
    l_t, dZ_t, dC_t = _cross_entropy(Z_t, C, codes_s, tau)
    l_s, dZ_s, dC_s = _cross_entropy(Z_s, C, codes_t, tau)
    loss = float(np.mean(l_t + l_s))
    return loss, (dC_t + dC_s) / B, dZ_t / B, dZ_s / B


def ssl1_loss(bank, sigma1=0.15):
    """Mean over seen/unseen prototype pairs of ``min(cos, sigma1)``.

    Returns ``(value, d/d unseen_block)``; the seen block gets no gradient.
    """
    cos, dcos = cosine_grad(bank.seen[:, None, :], bank.unseen[None, :, :])
    n_pairs = cos.size
    value = float(np.mean(np.minimum(cos, sigma1)))
    active = (cos < sigma1)[..., None]
    grad = np.sum(dcos * active, axis=0) / n_pairs
    return value, grad


def ssl2_loss(Z, labels, bank, sigma2=0.25, form="paper"):
    """Margin between a seen sample's own anchor and every unseen anchor.

    ``Z`` holds anchor-space rows of seen samples with class ids ``labels``.
    ``form="paper"`` averages ``max(diff, sigma2)``; ``form="hinge"``
    averages ``max(sigma2 - diff, 0)``, where
    ``diff = cos(z, c_y) - cos(z, c_u)``. Returns ``(value, d/d unseen_block)``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    seen_index = {c: i for i, c in bank.class_map.items()}
    try:
        idx = np.array([seen_index[int(y)] for y in np.asarray(labels).tolist()], dtype=int)
    except KeyError as exc:
        raise UnknownLabel(f"label {exc.args[0]} is not a seen class") from None
    own, _ = cosine_grad(Z, bank.prototypes[idx])
    cu, dcu = cosine_grad(Z[:, None, :], bank.unseen[None, :, :])
    diff = own[:, None] - cu
    n_terms = diff.size
    if form == "paper":
        value = float(np.mean(np.maximum(diff, sigma2)))
        sign = -1.0 * (diff > sigma2)
    elif form == "hinge":
        value = float(np.mean(np.maximum(sigma2 - diff, 0.0)))
        sign = 1.0 * (diff < sigma2)
    else:
        raise ConfigError(f"unknown ssl2 form {form!r}")
    grad = np.sum(dcu * sign[..., None], axis=0) / n_terms
    return value, grad


def _embed_with_cache(head, X):
    if head is None:
        Zn, norms = normalize_rows(X)
        return Zn, norms, None
    Y, cache = mlp_forward(head, X)
    Zn, norms = normalize_rows(Y)
    return Zn, norms, cache


def _unit_backward(Z, norms, dZ):
    """Backprop through ``z = y / ||y||``."""
    return (dZ - Z * np.sum(Z * dZ, axis=1, keepdims=True)) / norms[:, None]


def match_clusters(assign, labels, n_clusters, classes):
    """Hungarian matching of cluster indices to classes by co-occurrence.

    Returns ``(mapping cluster -> class, matched counts)``.
    """
    col = {c: j for j, c in enumerate(classes)}
    M = np.zeros((n_clusters, len(classes)), dtype=np.int64)
    for a, y in zip(assign, labels):
        M[a, col[y]] += 1
    rows, cols = linear_sum_assignment(-M)
    return {int(r): classes[c] for r, c in zip(rows, cols)}, M[rows, cols]


def _renorm(C):
    C /= np.linalg.norm(C, axis=1, keepdims=True)


def fit_seen_prototypes(X, labels, cfg, rng):
    """Cluster seen-class features into one prototype per seen class.

    Labels only seed the prototypes (per-class mean directions) and name
    them afterwards via Hungarian matching; the optimization itself is the
    label-free swapped-prediction objective over prototypes and the
    optional projection head.
    """
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(labels))
    n_s = len(classes)
    head = None
    if cfg.proj_dims:
        dims = [X.shape[1]] + list(cfg.proj_dims)
        head = init_mlp(dims, [leaky(0.2)] * (len(dims) - 2) + ["linear"], rng)
    Z0 = _embed_with_cache(head, X)[0]
    C = np.stack([Z0[labels == c].mean(axis=0) for c in classes])
    _renorm(C)
    params = [C] + ([] if head is None else head.params())
    opt = AdamState(params, lr=cfg.lr)
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            Xb = X[order[start:start + cfg.batch_size]]
            Vt, Vs = augment_features(Xb, cfg, rng)
            Zt, nt, ct = _embed_with_cache(head, Vt)
            Zs, ns, cs = _embed_with_cache(head, Vs)
            Qt = sinkhorn_assign(C @ Zt.T, cfg.eps_sinkhorn, cfg.sinkhorn_iters)
            Qs = sinkhorn_assign(C @ Zs.T, cfg.eps_sinkhorn, cfg.sinkhorn_iters)
            loss, dC, dZt, dZs = swapped_loss(Zt, Zs, C, Qt, Qs, cfg.tau)
            grads = [dC]
            if head is not None:
                gt, _ = mlp_backward(head, ct, _unit_backward(Zt, nt, dZt))
                gs, _ = mlp_backward(head, cs, _unit_backward(Zs, ns, dZs))
                grads += [a + b for a, b in zip(gt, gs)]
            opt.step(params, grads)
            _renorm(C)
            total += loss * Xb.shape[0]
        log.debug("seen clustering epoch %d loss %.6f", epoch, total / n)
    assign = np.argmax(_embed_with_cache(head, X)[0] @ C.T, axis=1)
    mapping, support = match_clusters(assign, labels.tolist(), n_s, classes)
    if np.any(support == 0):
        raise DegenerateClustering("a seen prototype attracts no samples of its matched class")
    return PrototypeBank(C, n_seen=n_s, n_unseen=0, class_map=mapping, seen_frozen=True, head=head)


def _unseen_codes(scores_u, n_seen, cfg):
    """Sinkhorn codes over the unseen block, zero-padded over the seen block."""
    Q = sinkhorn_assign(scores_u, cfg.eps_sinkhorn, cfg.sinkhorn_iters)
    return np.vstack([np.zeros((n_seen, Q.shape[1])), Q])


def init_unseen_prototypes(bank, n_unseen, sigma1, rng, max_tries=100000):
    """Random unit vectors kept only if their cosine to every seen anchor is below ``sigma1``."""
    out = []
    tries = 0
    while len(out) < n_unseen:
        tries += 1
        if tries > max_tries:
            raise DegenerateClustering("could not place unseen prototypes away from the seen block")
        v = rng.standard_normal(bank.dim)
        v /= np.linalg.norm(v)
        if bank.n_seen == 0 or np.max(bank.seen @ v) < sigma1:
            out.append(v)
    return np.array(out).reshape(n_unseen, bank.dim)


def fit_unseen_prototypes(X_u, bank, cfg, rng, n_unseen, X_seen=None, y_seen=None):
    """Fit the unseen block on unlabeled features with the seen block frozen.

    Objective per step: swapped-prediction loss of the unseen batch against
    the unseen block, plus ``lambda1 * ssl1``, plus the margin term on a
    random seen batch (``-lambda2 * ssl2`` for the default ``paper`` form,
    ``+lambda2 * ssl2`` for ``hinge``). The projection head stays frozen.
    """
    cfg.validate()
    if not bank.seen_frozen:
        raise ValueError("seen prototypes must be frozen before fitting the unseen block")
    X_u = np.asarray(X_u, dtype=np.float64)
    use_ssl2 = X_seen is not None and len(X_seen) > 0 and cfg.lambda2 > 0
    seen_rng = np.random.Generator(np.random.Philox(int(rng.integers(2 ** 63))))
    seen = bank.seen.copy()
    Cu = init_unseen_prototypes(bank, n_unseen, cfg.sigma1, rng)
    work = PrototypeBank(np.concatenate([seen, Cu]), bank.n_seen, n_unseen,
                         dict(bank.class_map), True, bank.head)
    if use_ssl2:
        Zseen = bank.embed(np.asarray(X_seen, dtype=np.float64))
        y_seen = np.asarray(y_seen)
    opt = AdamState([Cu], lr=cfg.lr)
    sign2 = -1.0 if cfg.ssl2_form == "paper" else 1.0
    n = X_u.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            Xb = X_u[order[start:start + cfg.batch_size]]
            Vt, Vs = augment_features(Xb, cfg, rng)
            Zt, Zs = bank.embed(Vt), bank.embed(Vs)
            work.prototypes[bank.n_seen:] = Cu
            Qt = _unseen_codes(Cu @ Zt.T, bank.n_seen, cfg)
            Qs = _unseen_codes(Cu @ Zs.T, bank.n_seen, cfg)
            _, dC, _, _ = swapped_loss(Zt, Zs, work.prototypes, Qt, Qs, cfg.tau)
            grad = dC[bank.n_seen:]
            if cfg.lambda1 > 0 and bank.n_seen:
                grad = grad + cfg.lambda1 * ssl1_loss(work, cfg.sigma1)[1]
            if use_ssl2:
                pick = seen_rng.integers(0, len(Zseen), size=min(cfg.batch_size, len(Zseen)))
                grad = grad + sign2 * cfg.lambda2 * ssl2_loss(
                    Zseen[pick], y_seen[pick], work, cfg.sigma2, cfg.ssl2_form)[1]
            opt.step([Cu], [grad])
            _renorm(Cu)
    return PrototypeBank(np.concatenate([seen, Cu]), bank.n_seen, n_unseen,
                         dict(bank.class_map), True, bank.head)
