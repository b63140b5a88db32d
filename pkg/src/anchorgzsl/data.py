"""Feature files and the synthetic desk-scale benchmark."""
import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, MagicMismatch, ParseError, RejectionTimeout, TruncatedFile
from .evaluation import SplitSpec
from .numerics import make_rng, normalize_rows

FVEC_MAGIC = b"FVEC1"
_HEADER = struct.Struct("<II")


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: dict = None
    attributes: np.ndarray = None
    n_classes: int = None
    class_means: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must match feature rows")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError("labels must lie in [0, n_classes)")
        if self.attributes is not None:
            self.attributes = np.asarray(self.attributes, dtype=np.float64)
            if self.attributes.shape[0] != self.n_classes:
                raise DataError("attribute table needs one row per class")

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx):
        return self.features[idx], self.labels[idx]


def _format_for(path, fmt):
    if fmt:
        return {"fvec": "fvec1"}.get(fmt, fmt)
    return "csv" if str(path).endswith(".csv") else "fvec1"


def save_features(ds, path, fmt=None):
    fmt = _format_for(path, fmt)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"f{j}" for j in range(ds.dim)])
            for y, row in zip(ds.labels.tolist(), ds.features.tolist()):
                w.writerow([y] + [repr(v) for v in row])
    elif fmt == "fvec1":
        n, d = ds.features.shape
        with open(path, "wb") as fh:
            fh.write(FVEC_MAGIC)
            fh.write(_HEADER.pack(n, d))
            fh.write(ds.features.astype("<f4").tobytes())
            fh.write(ds.labels.astype("<i4").tobytes())
    else:
        raise DataError(f"unknown feature format {fmt!r}")


def load_features(path, fmt=None):
    fmt = _format_for(path, fmt)
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "fvec1":
        return _load_fvec(path)
    raise DataError(f"unknown feature format {fmt!r}")


def _load_csv(path):
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
            raise ParseError("header must be label,f0,...,f{d-1}", line=1)
        d = len(header) - 1
        labels, feats = [], []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ParseError(f"expected {d + 1} fields, got {len(row)}", line=lineno)
            try:
                labels.append(int(row[0]))
                feats.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    return FeatureDataset(np.array(feats, dtype=np.float64).reshape(-1, d), np.array(labels, dtype=int))


def _load_fvec(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(FVEC_MAGIC)] != FVEC_MAGIC:
        raise MagicMismatch(f"{path}: not an FVEC1 file")
    off = len(FVEC_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise TruncatedFile(f"{path}: header cut short at offset {len(blob)}")
    n, d = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    need = off + 4 * n * d + 4 * n
    if len(blob) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off).astype(np.float64).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 4 * n * d).astype(int)
    return FeatureDataset(feats, labels)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def make_synthetic_benchmark(K=5, n_seen=3, d=32, sep_cos_max=0.3, n_per_class=300, noise_std=0.1,
                             seed=0, overlap_cos=None, max_tries=100000):
    """Gaussian clusters on the unit sphere with bounded pairwise mean cosine.

    Class means are drawn uniformly on the sphere, each redrawn until its
    cosine with every earlier mean is at most ``sep_cos_max``. Samples are
    ``normalize(mean + N(0, noise_std^2 I))``. Classes ``0..n_seen-1`` are
    seen, the rest unseen. With ``overlap_cos`` set, the first unseen
    class mean is placed at exactly that cosine to the first seen class
    (and still separated from all others).
    """
    if not 0 < n_seen < K:
        raise DataError("need 0 < n_seen < K")
    if not 0 < sep_cos_max < 1:
        raise DataError("sep_cos_max must lie in (0, 1)")
    rng = make_rng(seed, "benchmark")
    means = []
    tries = 0
    for k in range(K):
        while True:
            tries += 1
            if tries > max_tries:
                raise RejectionTimeout(f"could not place {K} means in d={d} with cosine <= {sep_cos_max}")
            if overlap_cos is not None and k == n_seen:
                u = _unit(rng, d)
                u -= (u @ means[0]) * means[0]
                m = overlap_cos * means[0] + np.sqrt(1 - overlap_cos ** 2) * u / np.linalg.norm(u)
                others = means[1:]
            else:
                m = _unit(rng, d)
                others = means
            if all(m @ o <= sep_cos_max for o in others):
                means.append(m)
                break
    means = np.array(means)
    labels = np.repeat(np.arange(K), n_per_class)
    X = means[labels] + noise_std * rng.standard_normal((labels.size, d))
    X = normalize_rows(X)[0]
    split = SplitSpec(seen_classes=list(range(n_seen)), unseen_classes=list(range(n_seen, K)), seed=seed)
    return FeatureDataset(X, labels, n_classes=K, class_means=means), split
