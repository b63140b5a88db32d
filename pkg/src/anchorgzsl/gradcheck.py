"""Finite-difference audit of every training loss on tiny random instances."""
import numpy as np

from .clustering import PrototypeBank, sinkhorn_assign, ssl1_loss, ssl2_loss, swapped_loss
from .nn import grad_check, init_mlp, leaky
from .numerics import make_rng, normalize_rows
from .synthesis import GanConfig, SoftmaxClassifier, critic_loss, generator_loss, softmax_nll, ssl3_batch

H = 1e-5


def _bank(rng, n_s=3, n_u=2, d=6):
    C = normalize_rows(rng.standard_normal((n_s + n_u, d)))[0]
    return PrototypeBank(C, n_s, n_u, {i: i for i in range(n_s)}, True)


def check_swapped(seed):
    rng = make_rng(seed, "gc-swapped")
    B, K, d = 5, 4, 6
    C = normalize_rows(rng.standard_normal((K, d)))[0]
    Zt = normalize_rows(rng.standard_normal((B, d)))[0]
    Zs = normalize_rows(rng.standard_normal((B, d)))[0]
    Qt = sinkhorn_assign(rng.standard_normal((K, B)), 0.5, 3)
    Qs = sinkhorn_assign(rng.standard_normal((K, B)), 0.5, 3)

    def fn():
        loss, dC, dZt, dZs = swapped_loss(Zt, Zs, C, Qt, Qs, 0.1)
        return loss, [dC, dZt, dZs]
    return grad_check(fn, [C, Zt, Zs], H)


def check_ssl1(seed):
    rng = make_rng(seed, "gc-ssl1")
    bank = _bank(rng)
    Cu = bank.prototypes[bank.n_seen:]

    def fn():
        # sigma1 large enough that some pairs sit on each side of the cap
        return ssl1_loss(bank, 0.3)[0], [ssl1_loss(bank, 0.3)[1]]
    return grad_check(fn, [Cu], H)


def check_ssl2(seed, form="paper"):
    rng = make_rng(seed, "gc-ssl2")
    bank = _bank(rng)
    Cu = bank.prototypes[bank.n_seen:]
    Z = normalize_rows(rng.standard_normal((7, bank.dim)))[0]
    y = rng.integers(0, bank.n_seen, size=7)

    def fn():
        value, grad = ssl2_loss(Z, y, bank, 0.1, form)
        return value, [grad]
    return grad_check(fn, [Cu], H)


def check_ssl3(seed):
    rng = make_rng(seed, "gc-ssl3")
    bank = _bank(rng)
    X = rng.standard_normal((6, bank.dim))
    ids = rng.integers(0, bank.n_total, size=6)

    def fn():
        value, dX = ssl3_batch(X, bank, ids)
        return value, [dX]
    return grad_check(fn, [X], H)


def _tiny_gan(seed, d=6, hidden=16, d_z=4):
    rng = make_rng(seed, "gc-gan")
    bank = _bank(rng, d=d)
    e_dim = bank.n_total
    G = init_mlp([e_dim + d_z, hidden, hidden, d], [leaky(0.2), leaky(0.2), "linear"], rng, std=0.5)
    D = init_mlp([d + e_dim, hidden, 1], [leaky(0.2), "linear"], rng, std=0.5)
    clf = SoftmaxClassifier(init_mlp([d, bank.n_seen], ["linear"], rng, std=0.5), list(range(bank.n_seen)))
    return rng, bank, G, D, clf


def check_critic(seed):
    rng, bank, G, D, _ = _tiny_gan(seed)
    B, d = 8, bank.dim
    E = np.eye(bank.n_total)[rng.integers(0, bank.n_total, size=B)]
    Ef = np.eye(bank.n_total)[rng.integers(0, bank.n_total, size=B)]
    Xr = rng.standard_normal((B, d))
    Xf = rng.standard_normal((B, d))

    def fn():
        loss, grads, _, _ = critic_loss(D, Xr, E, Xf, Ef, 10.0, make_rng(seed, "gc-alpha"))
        return loss, grads
    return grad_check(fn, D.params(), H)


def check_generator(seed):
    rng, bank, G, D, clf = _tiny_gan(seed)
    cfg = GanConfig(d_z=4)
    ids = rng.integers(0, bank.n_total, size=8)
    Z = rng.standard_normal((8, cfg.d_z))

    def fn():
        loss, grads, _ = generator_loss(G, D, clf, bank, ids, Z, cfg)
        return loss, grads
    return grad_check(fn, G.params(), H)


def check_classifier(seed):
    rng = make_rng(seed, "gc-nll")
    clf = SoftmaxClassifier(init_mlp([6, 4], ["linear"], rng, std=0.5), [0, 1, 2, 3])
    X = rng.standard_normal((10, 6))
    y = rng.integers(0, 4, size=10)

    def fn():
        return softmax_nll(clf, X, y)
    return grad_check(fn, clf.net.params(), H)


CHECKS = {
    "swapped_loss": check_swapped,
    "ssl1": check_ssl1,
    "ssl2": check_ssl2,
    "ssl2_hinge": lambda s: check_ssl2(s, "hinge"),
    "ssl3": check_ssl3,
    "critic_loss": check_critic,
    "generator_loss": check_generator,
    "classifier_nll": check_classifier,
}


def run_suite(seeds=range(20)):
    """Worst relative error per loss over ``seeds``."""
    return {name: max(fn(s) for s in seeds) for name, fn in CHECKS.items()}
