"""Scalar kernels, small linear-algebra helpers and seeded randomness.

Matrices are plain ``float64`` numpy arrays. Randomness always flows
through an explicit :class:`numpy.random.Generator` backed by the
counter-based Philox bit generator, so every stochastic routine is a pure
function of its inputs and the generator state.
"""
import zlib

import numpy as np

from .errors import DimensionMismatch, NegativeEntry, NonFiniteValue, ZeroVector

ZERO_NORM = 1e-30


def make_rng(seed, *stream):
    """Philox generator for ``seed``, optionally split into a named substream.

    ``stream`` items may be ints or strings; strings are hashed with CRC32
    so substreams are stable across processes and platforms.
    """
    key = tuple(s if isinstance(s, int) else zlib.crc32(str(s).encode()) for s in stream)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def sample_gaussian(rng, n):
    if n < 0:
        raise ValueError("n must be non-negative")
    return rng.standard_normal(n)


def check_finite(arr, what="value"):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite {what}")
    return arr


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm >= ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


def normalize_rows(X):
    """Row-wise :func:`l2_normalize`; returns ``(unit_rows, norms)``."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if X.shape[0] and not np.all(norms >= ZERO_NORM):
        raise ZeroVector("cannot normalize a zero row")
    return X / norms[:, None], norms


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (na >= ZERO_NORM and nb >= ZERO_NORM):
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(A, B):
    """All-pairs cosine similarities between rows of ``A`` and rows of ``B``."""
    An, _ = normalize_rows(A)
    Bn, _ = normalize_rows(B)
    if An.shape[1] != Bn.shape[1]:
        raise DimensionMismatch("row dimensions differ")
    return np.clip(An @ Bn.T, -1.0, 1.0)


def cosine_grad(a, b):
    """Gradient of ``cos(a, b)`` with respect to ``b`` (rows broadcast).

    ``a`` and ``b`` are (..., d) arrays; returns ``(cos, dcos/db)``.
    """
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ua, ub = a / na, b / nb
    cos = np.sum(ua * ub, axis=-1, keepdims=True)
    return cos[..., 0], (ua - cos * ub) / nb


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def logsumexp(a, axis=None, keepdims=False):
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def tempered_softmax(logits, tau):
    if not tau > 0:
        raise ValueError("temperature must be positive")
    p = softmax(np.asarray(logits, dtype=np.float64) / tau)
    return check_finite(p, "softmax output")


def entropy(Q):
    Q = np.asarray(Q, dtype=np.float64)
    if np.any(Q < 0):
        raise NegativeEntry("entropy needs nonnegative entries")
    nz = Q[Q > 0]
    return float(-np.sum(nz * np.log(nz)))


def truncated_normal(rng, shape, std):
    """Normal draws redrawn until they fall inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std
