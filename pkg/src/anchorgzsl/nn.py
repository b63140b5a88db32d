"""Fully-connected networks with hand-written gradients.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of
row vectors maps through ``X @ W + b``. Every supported activation is
piecewise linear (``linear``, ``relu``, ``leaky_relu:<slope>``), which is
what makes the gradient-penalty double-backprop below exact: inside a
linear region the input gradient is a product of weight matrices and
fixed slope masks, with no second-derivative terms.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonScalarOutput, ZeroGradientNorm
from .numerics import check_finite, truncated_normal

FORMAT_NAME = "anchorgzsl.mlp"
FORMAT_VERSION = 1
MIN_GRAD_NORM = 1e-12


def negative_slope(tag):
    if tag == "linear":
        return 1.0
    if tag == "relu":
        return 0.0
    if tag.startswith("leaky_relu"):
        _, _, slope = tag.partition(":")
        return float(slope) if slope else 0.2
    raise ValueError(f"unknown activation {tag!r}")


def leaky(slope=0.2):
    return f"leaky_relu:{slope:g}"


@dataclass
class Mlp:
    weights: list
    biases: list
    activations: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionMismatch("weights, biases and activations must align")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise DimensionMismatch(f"layer {i}: bias does not match weight")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise DimensionMismatch(f"layer {i}: fan-in does not chain")
        for tag in self.activations:
            negative_slope(tag)

    @property
    def layer_dims(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_in(self):
        return self.weights[0].shape[0]

    @property
    def n_out(self):
        return self.weights[-1].shape[1]

    def params(self):
        """Parameter arrays in a fixed order: ``W0, b0, W1, b1, ...``.

        The arrays are the live storage, so optimizers update them in place.
        """
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self):
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                   list(self.activations))

    def equals(self, other):
        return (self.activations == other.activations
                and all(np.array_equal(a, b) for a, b in zip(self.params(), other.params())))


def init_mlp(layer_dims, activations, rng, std=0.01):
    """Truncated-normal weights with standard deviation ``std``, zero biases."""
    if len(activations) != len(layer_dims) - 1:
        raise DimensionMismatch("need one activation per layer")
    weights = [truncated_normal(rng, (a, b), std) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
    biases = [np.zeros(b) for b in layer_dims[1:]]
    return Mlp(weights, biases, list(activations))


def mlp_forward(net, X):
    """Forward pass over a batch; returns ``(output, cache)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != net.n_in:
        raise DimensionMismatch(f"input has {X.shape[1]} columns, network expects {net.n_in}")
    inputs, slopes = [], []
    a = X
    for W, b, tag in zip(net.weights, net.biases, net.activations):
        inputs.append(a)
        z = a @ W + b
        # zero pre-activation takes the positive-side slope
        d = np.where(z >= 0, 1.0, negative_slope(tag))
        slopes.append(d)
        a = z * d
    return a, (inputs, slopes)


def mlp_apply(net, X):
    return mlp_forward(net, X)[0]


def mlp_backward(net, cache, upstream):
    """Backprop ``upstream = dLoss/dOutput`` through a cached forward pass.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    :meth:`Mlp.params`.
    """
    inputs, slopes = cache
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.shape != slopes[-1].shape:
        raise DimensionMismatch(f"upstream shape {delta.shape} != output shape {slopes[-1].shape}")
    grads = [None] * (2 * len(net.weights))
    for l in range(len(net.weights) - 1, -1, -1):
        delta = delta * slopes[l]
        grads[2 * l] = inputs[l].T @ delta
        grads[2 * l + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[l].T
    return grads, delta


def input_grad(net, x):
    """Exact gradient of a scalar-output network with respect to its input."""
    if net.n_out != 1:
        raise NonScalarOutput(f"network has {net.n_out} outputs")
    _, cache = mlp_forward(net, x)
    _, dx = mlp_backward(net, cache, np.ones((1, 1)))
    return dx[0]


def _penalty_parts(net, Xhat, target_norm, n_feat):
    if net.n_out != 1:
        raise NonScalarOutput(f"critic has {net.n_out} outputs")
    _, (inputs, slopes) = mlp_forward(net, Xhat)
    deltas = [None] * len(net.weights)
    delta = np.ones((inputs[0].shape[0], 1))
    for l in range(len(net.weights) - 1, -1, -1):
        delta = delta * slopes[l]
        deltas[l] = delta
        delta = delta @ net.weights[l].T
    g = delta[:, :n_feat]
    norms = np.linalg.norm(g, axis=1)
    return slopes, deltas, g, norms, (norms - target_norm) ** 2


def penalty_value(net, Xhat, target_norm=1.0, n_feat=None):
    """Mean of ``(||grad_x D(x)||_2 - target)^2`` over the rows of ``Xhat``.

    Only the first ``n_feat`` input columns enter the norm; the rest (e.g. a
    conditioning vector) are held fixed.
    """
    Xhat = np.atleast_2d(np.asarray(Xhat, dtype=np.float64))
    n_feat = Xhat.shape[1] if n_feat is None else n_feat
    return float(_penalty_parts(net, Xhat, target_norm, n_feat)[4].mean())


def gradient_penalty(net, Xhat, target_norm=1.0, n_feat=None, mode="analytic", h=1e-6):
    """Batch gradient penalty and its gradient with respect to the critic.

    Returns ``(mean_penalty, param_grads, n_skipped)``. Rows whose input
    gradient norm is below ``MIN_GRAD_NORM`` contribute their penalty value
    but no parameter gradient (the norm is not differentiable there).

    ``mode="analytic"`` runs forward-over-reverse: with slope masks fixed
    the input gradient is ``g = W1 D1 W2 D2 ... WL DL``, so for a fixed
    upstream row ``u = dP/dg`` the weight gradient is ``outer(v_{l-1}, delta_l)``
    where ``v`` is ``u`` pushed forward through the masked linear network and
    ``delta`` is the usual backward sensitivity. Bias gradients vanish
    almost everywhere. ``mode="fd"`` is a slow central-difference fallback
    kept for audits.
    """
    Xhat = np.atleast_2d(np.asarray(Xhat, dtype=np.float64))
    n_feat = Xhat.shape[1] if n_feat is None else n_feat
    B = Xhat.shape[0]
    slopes, deltas, g, norms, pen = _penalty_parts(net, Xhat, target_norm, n_feat)
    ok = norms >= MIN_GRAD_NORM
    n_skipped = int(B - ok.sum())
    if mode == "fd":
        grads = []
        for p in net.params():
            gp = np.zeros_like(p)
            flat, gflat = p.reshape(-1), gp.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = penalty_value(net, Xhat, target_norm, n_feat)
                flat[i] = old - h
                fm = penalty_value(net, Xhat, target_norm, n_feat)
                flat[i] = old
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(gp)
        return float(pen.mean()), grads, n_skipped
    if mode != "analytic":
        raise ValueError(f"unknown mode {mode!r}")
    u = np.zeros((B, net.n_in))
    safe = np.where(ok, norms, 1.0)
    u[:, :n_feat] = np.where(ok, 2.0 * (norms - target_norm) / safe, 0.0)[:, None] * g
    grads = []
    v = u
    for l, W in enumerate(net.weights):
        grads.append(v.T @ deltas[l] / B)
        grads.append(np.zeros(W.shape[1]))
        v = (v @ W) * slopes[l]
    return float(pen.mean()), grads, n_skipped


def gp_param_grads(critic, xhat, target_norm=1.0, cond=None):
    """Single-sample penalty ``(||grad D(xhat, cond)|| - target)^2`` and its
    parameter gradients. Raises :class:`ZeroGradientNorm` (carrying the
    penalty) when the input-gradient norm vanishes."""
    xhat = np.asarray(xhat, dtype=np.float64)
    x = xhat if cond is None else np.concatenate([xhat, np.asarray(cond, dtype=np.float64)])
    value, grads, skipped = gradient_penalty(critic, x[None, :], target_norm, n_feat=xhat.size)
    if skipped:
        raise ZeroGradientNorm("critic input gradient vanishes", penalty=value)
    return value, grads


class AdamState:
    """Adam moments for one parameter list; :meth:`step` updates in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        if len(params) != len(self.m) or len(grads) != len(params):
            raise DimensionMismatch("parameter / gradient lists do not match optimizer state")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise DimensionMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            check_finite(p, "parameter after Adam step")
        return params


def adam_step(params, grads, state):
    state.step(params, grads)
    return params, state


def grad_check(loss_fn, params, h=1e-5, max_coords=None, rng=None, floor=1e-8):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn()`` returns ``(loss, grads)`` and reads ``params`` (which are
    perturbed in place and restored). With ``max_coords`` set, a seeded
    random subset of coordinates is checked per parameter array.

    The denominator is floored at ``floor`` or at ``1e5`` times the
    central-difference roundoff level ``eps * |loss| / h``, whichever is
    larger, so coordinates whose true gradient is exactly zero (dead units)
    do not report pure roundoff as error.
    """
    loss0, analytic = loss_fn()
    floor = max(floor, 1e5 * np.finfo(np.float64).eps * max(abs(loss0), 1.0) / h)
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat, aflat = p.reshape(-1), a.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()[0]
            flat[i] = old - h
            fm = loss_fn()[0]
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


def mlp_to_dict(net, extra=None):
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "layer_dims": net.layer_dims,
        "activations": list(net.activations),
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    if extra:
        doc["extra"] = extra
    return doc


def mlp_from_dict(doc):
    if doc.get("format") != FORMAT_NAME:
        raise ValueError("not a serialized network")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {doc.get('version')}")
    dims = doc["layer_dims"]
    weights = [np.array(W, dtype=np.float64).reshape(a, b)
               for W, a, b in zip(doc["weights"], dims[:-1], dims[1:])]
    biases = [np.array(b, dtype=np.float64).reshape(-1) for b in doc["biases"]]
    return Mlp(weights, biases, list(doc["activations"]))


def save_mlp(net, path, extra=None):
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(net, extra), fh)


def load_mlp(path):
    """Load a network; returns ``(net, extra)``."""
    with open(path) as fh:
        doc = json.load(fh)
    return mlp_from_dict(doc), doc.get("extra")
