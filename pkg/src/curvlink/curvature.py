"""Input-loss curvature scores.

The score of a sample is a Hutchinson-style finite-difference estimate

    Curv(x) = 1/n * sum_j || grad_x l(x + h v_j) - grad_x l(x) ||^2

with Rademacher probes ``v_j``.  Since ``grad(x + h v) - grad(x) ~ h H v`` and
``E ||H v||^2 = tr(H^2)``, dividing by ``h^2`` ("normalized" mode) gives an
estimate of ``tr(H^2)``; "raw" mode keeps the undivided mean.

Probes for a sample come from the stream keyed by ``(seed, sample_id)`` and
row ``j`` of that stream is probe ``j``, so a score never depends on which
other samples are scored alongside it, and the first ``n`` probes of an
``n' > n`` run are the same vectors.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from curvlink import nn, rng
from curvlink.errors import ConfigurationError, InsufficientModelsError

MODES = ("raw", "normalized")
WHICH = ("holding_i", "excluding_i", "all")
# rows pushed through the network per call; bounds peak memory
_CHUNK_ROWS = 1 << 15


@dataclass(frozen=True)
class CurvParams:
    h: float = 1e-3
    n: int = 10
    seed: int = 0
    mode: str = "normalized"

    def __post_init__(self):
        if not 1e-6 <= self.h <= 1.0:
            raise ConfigurationError(f"h={self.h} outside [1e-6, 1]")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError("n must be a positive integer")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")

    def to_dict(self):
        return {"h": self.h, "n": int(self.n), "seed": int(self.seed), "mode": self.mode}


def probes(seed, sample_id, n, d):
    """``(n, d)`` matrix of +-1 entries for one sample."""
    g = rng.stream(seed, "curv-probe", int(sample_id))
    return np.where(g.random((n, d)) < 0.5, -1.0, 1.0)


def probe_bank(p, sample_ids, d):
    """Probes for many samples, shape ``(len(sample_ids), n, d)``."""
    return np.stack([probes(p.seed, s, p.n, d) for s in sample_ids])


def fd_curvature(grad_fn, X, V, h, mode="normalized"):
    """Finite-difference score for a generic batched gradient function.

    ``grad_fn`` maps an ``(r, d)`` array of points to their ``(r, d)``
    gradients, ``X`` is ``(s, d)`` and ``V`` is ``(s, n, d)``.
    """
    X = np.asarray(X, dtype=np.float64)
    s, n, d = V.shape
    pts = np.concatenate([X, (X[:, None, :] + h * V).reshape(s * n, d)])
    G = grad_fn(pts)
    base, shifted = G[:s], G[s:].reshape(s, n, d)
    diff = shifted - base[:, None, :]
    score = np.einsum("snd,snd->s", diff, diff) / n
    if mode == "normalized":
        score = score / (h * h)
    return score


def curvature_scores(model, X, y, sample_ids, p, V=None):
    """Scores for many samples under one model."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    d = model.spec.input_dim
    if X.ndim != 2 or X.shape[1] != d:
        raise ConfigurationError(f"expected inputs of width {d}")
    if V is None:
        V = probe_bank(p, sample_ids, d)
    out = np.empty(len(X))
    step = max(1, _CHUNK_ROWS // (p.n + 1))
    for lo in range(0, len(X), step):
        hi = min(lo + step, len(X))
        yy = y[lo:hi]
        labels = np.concatenate([yy, np.repeat(yy, p.n)])

        def grad_fn(P, labels=labels):
            return nn.input_gradients(model, P, labels)

        out[lo:hi] = fd_curvature(grad_fn, X[lo:hi], V[lo:hi], p.h, p.mode)
    return out


def curvature_score(model, z, p):
    """Score of one example (see module docstring)."""
    return float(curvature_scores(model, np.atleast_2d(z.x), [z.y], [z.sample_id], p)[0])


def _columns(ensemble, S, sample_ids):
    if S is None:
        return np.asarray(sample_ids, dtype=np.int64)
    return np.array([S.index_of(s) for s in sample_ids], dtype=np.int64)


def _select(ensemble, col, which):
    if which not in WHICH:
        raise ConfigurationError(f"which must be one of {WHICH}")
    inc = ensemble.masks.masks[:, col]
    if which == "holding_i":
        return np.flatnonzero(inc)
    if which == "excluding_i":
        return np.flatnonzero(~inc)
    return np.arange(ensemble.K)


def _mean_stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 1:
        return float(values[0]), float("nan")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values)))


def expected_curvature(ensemble, z, p, which="excluding_i", S=None):
    """Mean and standard error of the score over a subset of the ensemble.

    ``excluding_i`` averages over models whose mask left ``z`` out,
    ``holding_i`` over those that trained on it.  The standard error is NaN
    when only one model is selected.
    """
    col = int(_columns(ensemble, S, [z.sample_id])[0])
    ks = _select(ensemble, col, which)
    if len(ks) == 0:
        inc = int(ensemble.masks.masks[:, col].sum())
        raise InsufficientModelsError(
            f"no models for sample {z.sample_id} ({which})",
            counts={"in": inc, "out": ensemble.K - inc})
    V = probes(p.seed, z.sample_id, p.n, len(z.x))[None]
    scores = [float(curvature_scores(ensemble.models[k], np.atleast_2d(z.x), [z.y],
                                     [z.sample_id], p, V)[0]) for k in ks]
    return _mean_stderr(scores)


def _model_scores(args):
    model, X, y, ids, p, V = args
    if len(X) == 0:
        return np.empty(0)
    return curvature_scores(model, X, y, ids, p, V)


@dataclass
class CurvTable:
    sample_ids: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    count: np.ndarray
    params: CurvParams
    which: str

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "model_count", "mean_curv", "stderr_curv", "mode", "h", "n", "seed"])
        for s, c, mu, se in zip(self.sample_ids, self.count, self.mean, self.stderr):
            w.writerow([int(s), int(c), repr(float(mu)), repr(float(se)), self.params.mode,
                        repr(float(self.params.h)), int(self.params.n), int(self.params.seed)])
        return buf.getvalue()


def curvature_matrix(ensemble, S, p, which="excluding_i", workers=1, sample_ids=None):
    """``(K, s)`` scores; entries a model does not contribute to are NaN.

    Model ``k`` scores only the samples ``which`` assigns to it, so the
    ``excluding_i`` matrix costs about ``(1 - ratio)`` of a full pass.
    """
    from curvlink.train import map_tasks

    if which not in WHICH:
        raise ConfigurationError(f"which must be one of {WHICH}")
    ids = np.asarray(S.sample_ids if sample_ids is None else sample_ids, dtype=np.int64)
    cols = np.array([S.index_of(s) for s in ids], dtype=np.int64)
    X, y = S.X[cols], S.y[cols]
    V = probe_bank(p, ids, S.X.shape[1])
    inc = ensemble.masks.masks[:, cols]
    sel = {"holding_i": inc, "excluding_i": ~inc, "all": np.ones_like(inc)}[which]
    tasks = [(mdl, X[sel[k]], y[sel[k]], ids[sel[k]], p, V[sel[k]])
             for k, mdl in enumerate(ensemble.models)]
    scores = np.full(sel.shape, np.nan)
    for k, s in enumerate(map_tasks(_model_scores, tasks, workers)):
        scores[k, sel[k]] = s
    return ids, scores


def ensemble_curvature(ensemble, S, p, which="excluding_i", workers=1, sample_ids=None):
    """Per-sample expected curvature over the models selected by ``which``.

    Samples with no selected model get NaN and count 0.
    """
    ids, scores = curvature_matrix(ensemble, S, p, which, workers, sample_ids)
    sel = ~np.isnan(scores)
    count = sel.sum(axis=0)
    mean = np.full(len(ids), np.nan)
    stderr = np.full(len(ids), np.nan)
    for j in range(len(ids)):
        if count[j]:
            mean[j], stderr[j] = _mean_stderr(scores[sel[:, j], j])
    return CurvTable(ids, mean, stderr, count, p, which)


def eigen_summary(H):
    """``(trace, sum of |eigenvalues|)`` of the symmetric part of ``H``."""
    H = np.asarray(H, dtype=np.float64)
    Hs = 0.5 * (H + H.T)
    lam = np.linalg.eigvalsh(Hs)
    return float(np.trace(Hs)), float(np.abs(lam).sum())


def eigen_curvature(model, z):
    """Trace and absolute-eigenvalue sum of the exact input Hessian."""
    return eigen_summary(nn.exact_input_hessian(model, z))
