"""Long-tailed Gaussian-mixture classification data.

The population is a mixture of isotropic Gaussian components: one large
"head" cluster per class plus a number of small, displaced "tail"
sub-populations.  Tail samples carry label noise at rate
``mislabel_fraction``.  Because every component is Gaussian the Bayes
posterior is available in closed form, which is what :func:`bayes_risk`
integrates.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from curvlink import rng
from curvlink.errors import ConfigurationError, NotFoundError
from curvlink.nn import Example


@dataclass(frozen=True)
class TailSpec:
    cls: int
    size: int
    offset_scale: float


@dataclass(frozen=True)
class GenSpec:
    n_classes: int
    dim: int
    head_per_class: int
    tail_subpops: tuple = ()
    mislabel_fraction: float = 0.0
    cluster_std: float = 1.0
    seed: int = 0
    class_sep: float = 4.0
    tail_std_factor: float = 0.5
    n_duplicate_pairs: int = 0

    def __post_init__(self):
        tails = tuple(t if isinstance(t, TailSpec) else TailSpec(**t) for t in self.tail_subpops)
        object.__setattr__(self, "tail_subpops", tails)
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if self.head_per_class < 0 or any(t.size < 0 for t in tails):
            raise ConfigurationError("negative cluster size")
        if any(not 0 <= t.cls < self.n_classes for t in tails):
            raise ConfigurationError("tail sub-population refers to an unknown class")
        if not 0.0 <= self.mislabel_fraction < 1.0:
            raise ConfigurationError("mislabel_fraction must lie in [0, 1)")
        if not self.cluster_std > 0:
            raise ConfigurationError("cluster_std must be > 0")
        if self.n_duplicate_pairs < 0 or self.n_duplicate_pairs > self.head_per_class * self.n_classes:
            raise ConfigurationError("n_duplicate_pairs must fit in the head clusters")
        if self.n_samples < 2:
            raise ConfigurationError(f"degenerate spec: {self.n_samples} samples (need m >= 2)")

    @property
    def n_tail(self):
        return sum(t.size for t in self.tail_subpops)

    @property
    def n_samples(self):
        return self.n_classes * self.head_per_class + self.n_tail + self.n_duplicate_pairs

    @property
    def tail_mass(self):
        """Population probability of drawing a tail sample."""
        total = self.n_classes * self.head_per_class + self.n_tail
        return self.n_tail / total if total else 0.0

    def to_dict(self):
        d = asdict(self)
        d["tail_subpops"] = [asdict(t) for t in self.tail_subpops]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus bookkeeping.

    ``mislabeled`` and ``duplicate_pairs`` record what the generator planted
    (sample ids), so experiments can check them without re-deriving it.
    """

    X: np.ndarray
    y: np.ndarray
    sample_ids: np.ndarray
    subpop_ids: np.ndarray
    genspec: Optional[GenSpec] = None
    bayes_risk: Optional[float] = None
    mislabeled: tuple = ()
    duplicate_pairs: tuple = ()
    n_classes: Optional[int] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ConfigurationError("X must be 2-D")
        n = X.shape[0]
        arrays = {}
        for name in ("y", "sample_ids", "subpop_ids"):
            a = np.array(getattr(self, name), dtype=np.int64)
            if a.shape != (n,):
                raise ConfigurationError(f"{name} has shape {a.shape}, expected ({n},)")
            a.flags.writeable = False
            arrays[name] = a
        if len(np.unique(arrays["sample_ids"])) != n:
            raise ConfigurationError("sample ids must be unique")
        if not np.all(np.isfinite(X)):
            raise ConfigurationError("non-finite features")
        X.flags.writeable = False
        object.__setattr__(self, "X", X)
        for name, a in arrays.items():
            object.__setattr__(self, name, a)
        if self.n_classes is None:
            k = self.genspec.n_classes if self.genspec else (int(arrays["y"].max()) + 1 if n else 0)
            object.__setattr__(self, "n_classes", k)
        if n and (arrays["y"].min() < 0 or arrays["y"].max() >= self.n_classes):
            raise ConfigurationError("labels outside [0, n_classes)")

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def genspec_digest(self):
        return self.genspec.digest() if self.genspec else ""

    def index_of(self, sample_id):
        hits = np.flatnonzero(self.sample_ids == sample_id)
        if hits.size == 0:
            raise NotFoundError(f"sample id {sample_id} not in dataset")
        return int(hits[0])

    def example(self, index):
        return Example(self.X[index], int(self.y[index]), int(self.sample_ids[index]),
                       int(self.subpop_ids[index]))

    @property
    def examples(self):
        return [self.example(i) for i in range(len(self))]

    def subset(self, mask_or_index):
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        keep = set(int(s) for s in self.sample_ids[idx])
        return Dataset(self.X[idx], self.y[idx], self.sample_ids[idx], self.subpop_ids[idx],
                       self.genspec, self.bayes_risk,
                       tuple(i for i in self.mislabeled if i in keep),
                       tuple(p for p in self.duplicate_pairs if p[0] in keep and p[1] in keep),
                       self.n_classes)

    def content_key(self):
        """Order-independent description, used by equality checks in tests."""
        order = np.argsort(self.sample_ids, kind="stable")
        return (self.sample_ids[order].tobytes(), self.y[order].tobytes(), self.X[order].tobytes())


# ----------------------------------------------------------------------------
# mixture geometry


def _class_means(spec):
    half = spec.class_sep / np.sqrt(2.0)
    if spec.n_classes <= spec.dim:
        means = np.zeros((spec.n_classes, spec.dim))
        means[np.arange(spec.n_classes), np.arange(spec.n_classes)] = half
        return means
    dirs = rng.stream(spec.seed, "class-dirs").standard_normal((spec.n_classes, spec.dim))
    return half * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _components(spec):
    """(weights, means, stds, label_probs) for every mixture component."""
    means = [m for m in _class_means(spec)]
    weights = [float(spec.head_per_class)] * spec.n_classes
    stds = [spec.cluster_std] * spec.n_classes
    labels = [np.eye(spec.n_classes)[k] for k in range(spec.n_classes)]
    class_means = _class_means(spec)
    f = spec.mislabel_fraction
    for j, t in enumerate(spec.tail_subpops):
        u = rng.stream(spec.seed, "tail-dir", j).standard_normal(spec.dim)
        u /= np.linalg.norm(u)
        means.append(class_means[t.cls] + t.offset_scale * spec.cluster_std * u)
        weights.append(float(t.size))
        stds.append(spec.cluster_std * spec.tail_std_factor)
        p = np.full(spec.n_classes, f / (spec.n_classes - 1))
        p[t.cls] = 1.0 - f
        labels.append(p)
    w = np.array(weights)
    if w.sum() <= 0:
        raise ConfigurationError("mixture has zero total weight")
    return w / w.sum(), np.array(means), np.array(stds), np.array(labels)


def generate(spec):
    """Draw the training set described by ``spec``; deterministic in ``spec.seed``."""
    class_means = _class_means(spec)
    _, comp_means, comp_stds, _ = _components(spec)
    X, y, sub = [], [], []
    for k in range(spec.n_classes):
        g = rng.stream(spec.seed, "head", k)
        X.append(class_means[k] + spec.cluster_std * g.standard_normal((spec.head_per_class, spec.dim)))
        y.append(np.full(spec.head_per_class, k))
        sub.append(np.full(spec.head_per_class, k))
    tail_start = spec.n_classes * spec.head_per_class
    for j, t in enumerate(spec.tail_subpops):
        c = spec.n_classes + j
        g = rng.stream(spec.seed, "tail", j)
        X.append(comp_means[c] + comp_stds[c] * g.standard_normal((t.size, spec.dim)))
        y.append(np.full(t.size, t.cls))
        sub.append(np.full(t.size, c))
    X = np.concatenate(X) if X else np.zeros((0, spec.dim))
    y = np.concatenate(y).astype(np.int64)
    sub = np.concatenate(sub).astype(np.int64)

    n_tail = spec.n_tail
    n_flip = int(round(spec.mislabel_fraction * n_tail))
    g = rng.stream(spec.seed, "mislabel")
    flip = tail_start + np.sort(g.choice(n_tail, size=n_flip, replace=False)) if n_flip else np.array([], int)
    for i in flip:
        shift = g.integers(1, spec.n_classes)
        y[i] = (y[i] + shift) % spec.n_classes

    n_base = len(y)
    dups = []
    if spec.n_duplicate_pairs:
        g = rng.stream(spec.seed, "duplicates")
        src = np.sort(g.choice(tail_start, size=spec.n_duplicate_pairs, replace=False))
        X = np.concatenate([X, X[src]])
        y = np.concatenate([y, y[src]])
        sub = np.concatenate([sub, sub[src]])
        dups = [(int(s), n_base + k) for k, s in enumerate(src)]

    ids = np.arange(len(y))
    return Dataset(X, y, ids, sub, spec, None, tuple(int(i) for i in flip), tuple(dups))


def sample_population(spec, n, seed, id_offset=0):
    """i.i.d. draws from the population mixture (e.g. a holdout set)."""
    w, means, stds, labels = _components(spec)
    g = rng.stream(seed, "population", spec.seed)
    comp = g.choice(len(w), size=n, p=w)
    X = means[comp] + stds[comp][:, None] * g.standard_normal((n, spec.dim))
    u = g.random(n)
    cum = np.cumsum(labels[comp], axis=1)
    y = np.minimum((u[:, None] >= cum).sum(axis=1), spec.n_classes - 1)
    ids = id_offset + np.arange(n)
    return Dataset(X, y, ids, comp, spec, None)


def generate_holdout(spec, n, seed):
    """Population sample whose ids start after the training ids."""
    return sample_population(spec, n, seed, id_offset=spec.n_samples)


def bayes_posterior(spec, X):
    """P(y | x) under the population mixture, shape ``(n, n_classes)``."""
    w, means, stds, labels = _components(spec)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = spec.dim
    sq = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    logdens = -0.5 * sq / stds**2 - d * np.log(stds) + np.log(w)
    logdens -= logdens.max(axis=1, keepdims=True)
    dens = np.exp(logdens)
    joint = dens @ labels
    return joint / joint.sum(axis=1, keepdims=True)


def bayes_risk(spec, n_mc=100_000, seed=0):
    """Monte-Carlo 0-1 risk of the Bayes classifier; returns ``(risk, stderr)``.

    Averages ``1 - max_y P(y|x)`` over population draws rather than counting
    errors, which has lower variance for the same ``n_mc``.
    """
    if n_mc < 10_000:
        raise ConfigurationError("n_mc must be >= 1e4")
    vals = []
    chunk = 20_000
    for c, start in enumerate(range(0, n_mc, chunk)):
        size = min(chunk, n_mc - start)
        pop = sample_population(spec, size, rng.derive_seed(seed, "bayes-mc", c))
        vals.append(1.0 - bayes_posterior(spec, pop.X).max(axis=1))
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_mc))


def with_bayes_risk(S, risk):
    return Dataset(S.X, S.y, S.sample_ids, S.subpop_ids, S.genspec, risk,
                   S.mislabeled, S.duplicate_pairs, S.n_classes)


# ----------------------------------------------------------------------------
# dataset constructions


def dataset_distance(S, T):
    """How many samples differ between two datasets (by id and content)."""
    def keys(D):
        return {(int(i), int(c), D.X[k].tobytes()) for k, (i, c) in enumerate(zip(D.sample_ids, D.y))}
    a, b = keys(S), keys(T)
    return max(len(a - b), len(b - a))


def leave_one_out(S, sample_id):
    k = S.index_of(sample_id)
    keep = np.ones(len(S), dtype=bool)
    keep[k] = False
    return S.subset(keep)


def _gaussian_alpha(g, d, sigma):
    a = sigma * g.standard_normal(d)
    bad = np.abs(a) > 6.0 * sigma
    while bad.any():
        a[bad] = sigma * g.standard_normal(int(bad.sum()))
        bad = np.abs(a) > 6.0 * sigma
    return a


def draw_alpha(d, mode="gaussian", upsilon=None, sigma=None, seed=0, count=None):
    """Perturbation(s) for the adjacency construction.

    ``gaussian`` draws N(0, sigma^2 I) truncated at 6 sigma per coordinate;
    the default sigma = 1/sqrt(d) gives E[alpha^T alpha] = 1.  ``ball_uniform``
    draws uniformly from the L2 ball of radius ``upsilon``.
    """
    g = rng.stream(seed, "alpha", d)
    n = 1 if count is None else count
    if mode == "ball_uniform":
        if upsilon is None or not upsilon > 0:
            raise ConfigurationError("ball_uniform needs upsilon > 0")
        dirs = g.standard_normal((n, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = upsilon * g.random(n) ** (1.0 / d)
        out = dirs * radii[:, None]
    elif mode == "gaussian":
        s = 1.0 / np.sqrt(d) if sigma is None else float(sigma)
        if not s > 0:
            raise ConfigurationError("sigma must be > 0")
        out = np.stack([_gaussian_alpha(g, d, s) for _ in range(n)])
    else:
        raise ConfigurationError(f"unknown adjacency mode {mode!r}")
    return out[0] if count is None else out


def make_adjacent(S, sample_id, upsilon, mode="gaussian", sigma=None, seed=0):
    """Append ``z_i + alpha`` (label copied) and return ``(dataset, alpha)``."""
    if not upsilon > 0:
        raise ConfigurationError("upsilon must be > 0")
    k = S.index_of(sample_id)
    alpha = draw_alpha(S.dim, mode, upsilon=upsilon, sigma=sigma, seed=rng.derive_seed(seed, "adjacent", sample_id))
    new_id = int(S.sample_ids.max()) + 1
    out = Dataset(np.vstack([S.X, S.X[k] + alpha]), np.append(S.y, S.y[k]),
                  np.append(S.sample_ids, new_id), np.append(S.subpop_ids, S.subpop_ids[k]),
                  S.genspec, S.bayes_risk, S.mislabeled, S.duplicate_pairs, S.n_classes)
    return out, alpha


@dataclass(frozen=True, eq=False)
class MaskSet:
    masks: np.ndarray
    ratio: float
    seed: int
    frozen_core: tuple = field(default=())

    @property
    def K(self):
        return self.masks.shape[0]

    @property
    def m(self):
        return self.masks.shape[1]

    def mask_id(self, k):
        return f"{self.seed}:{k}"

    def n_distinct(self):
        return len({row.tobytes() for row in np.packbits(self.masks, axis=1)})


def subsample_masks(m, ratio, K, seed, frozen_core=None):
    """K uniform without-replacement inclusion masks.

    With ``frozen_core`` (indices), those positions are always included and
    ``floor(ratio * remainder)`` of the other positions are sampled.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError("ratio must lie in (0, 1)")
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    core = np.zeros(m, dtype=bool)
    if frozen_core is not None:
        core[np.asarray(list(frozen_core), dtype=np.int64)] = True
    rest = np.flatnonzero(~core)
    take = int(np.floor(ratio * rest.size))
    if rest.size and take < 1:
        raise ConfigurationError(f"ratio * m = {ratio * rest.size:.3g} < 1")
    masks = np.zeros((K, m), dtype=bool)
    masks[:, core] = True
    for k in range(K):
        if take:
            chosen = rng.stream(seed, "mask", k).choice(rest, size=take, replace=False)
            masks[k, chosen] = True
    ms = MaskSet(masks, float(ratio), int(seed), tuple(int(i) for i in np.flatnonzero(core)))
    if K > 1 and 0 < take < rest.size and ms.n_distinct() < K:
        warnings.warn(f"{K - ms.n_distinct()} duplicated masks in mask set (seed {seed})")
    return ms


# ----------------------------------------------------------------------------
# files


def _fmt(v):
    return format(float(v), ".17g")


def to_csv(S):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "subpop_id", "y"] + [f"x_{j}" for j in range(S.dim)])
    for k in range(len(S)):
        w.writerow([int(S.sample_ids[k]), int(S.subpop_ids[k]), int(S.y[k])] + [_fmt(v) for v in S.X[k]])
    return buf.getvalue()


def sidecar(S):
    return {
        "genspec": S.genspec.to_dict() if S.genspec else None,
        "genspec_digest": S.genspec_digest,
        "bayes_risk": S.bayes_risk,
        "n_classes": S.n_classes,
        "mislabeled": list(S.mislabeled),
        "duplicate_pairs": [list(p) for p in S.duplicate_pairs],
    }


def save_dataset(S, csv_path, json_path):
    with open(csv_path, "w", newline="") as fh:
        fh.write(to_csv(S))
    with open(json_path, "w") as fh:
        json.dump(sidecar(S), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(csv_path, json_path):
    with open(json_path) as fh:
        meta = json.load(fh)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    sub = np.array([int(r[1]) for r in body], dtype=np.int64)
    y = np.array([int(r[2]) for r in body], dtype=np.int64)
    X = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    spec = GenSpec.from_dict(meta["genspec"]) if meta.get("genspec") else None
    return Dataset(X, y, ids, sub, spec, meta.get("bayes_risk"), tuple(meta.get("mislabeled", ())),
                   tuple(tuple(p) for p in meta.get("duplicate_pairs", ())), meta.get("n_classes"))
