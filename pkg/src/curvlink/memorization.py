"""Stability-based memorization scores from subsampled ensembles.

mem(i) = P[model trained with i classifies i correctly]
       - P[model trained without i classifies i correctly]

Both probabilities are estimated from an :class:`EnsembleRecord`: models
whose mask includes ``i`` give ``p_in``, the rest give ``p_out``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from curvlink import data, privacy, train
from curvlink.errors import ConfigurationError, CurvlinkError

log = logging.getLogger(__name__)


@dataclass
class ScoreTable:
    """Per-sample memorization (and optionally curvature) scores.

    Rows with no in-models or no out-models carry ``mem = NaN`` and a flag
    instead of a made-up value.
    """

    sample_ids: np.ndarray
    mem: np.ndarray
    mem_stderr: np.ndarray
    in_count: np.ndarray
    out_count: np.ndarray
    p_in: np.ndarray
    p_out: np.ndarray
    flags: list
    curv_mean: Optional[np.ndarray] = None
    curv_stderr: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.sample_ids)

    @property
    def valid(self):
        return ~np.isnan(self.mem)

    def row(self, sample_id):
        j = int(np.flatnonzero(self.sample_ids == sample_id)[0])
        return {"sample_id": int(self.sample_ids[j]), "mem": float(self.mem[j]),
                "mem_stderr": float(self.mem_stderr[j]), "in_count": int(self.in_count[j]),
                "out_count": int(self.out_count[j]), "flags": self.flags[j]}

    def mem_of(self, sample_ids):
        pos = {int(s): j for j, s in enumerate(self.sample_ids)}
        return np.array([self.mem[pos[int(s)]] for s in sample_ids])

    def with_curvature(self, table):
        """Attach per-sample curvature from a :class:`curvature.CurvTable`."""
        pos = {int(s): j for j, s in enumerate(table.sample_ids)}
        cm = np.full(len(self), np.nan)
        cs = np.full(len(self), np.nan)
        for j, s in enumerate(self.sample_ids):
            if int(s) in pos:
                cm[j] = table.mean[pos[int(s)]]
                cs[j] = table.stderr[pos[int(s)]]
        return replace(self, curv_mean=cm, curv_stderr=cs)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "mem", "mem_stderr", "in_count", "out_count", "curv_mean",
                    "curv_stderr", "flags"])
        for j in range(len(self)):
            cm = "" if self.curv_mean is None else repr(float(self.curv_mean[j]))
            cs = "" if self.curv_stderr is None else repr(float(self.curv_stderr[j]))
            w.writerow([int(self.sample_ids[j]), repr(float(self.mem[j])),
                        repr(float(self.mem_stderr[j])), int(self.in_count[j]),
                        int(self.out_count[j]), cm, cs, ";".join(self.flags[j])])
        return buf.getvalue()


def scores_from_matrices(correct, masks, sample_ids):
    """Memorization scores from a ``(K, m)`` correctness and mask pair."""
    correct = np.asarray(correct, dtype=bool)
    masks = np.asarray(masks, dtype=bool)
    if correct.shape != masks.shape:
        raise ConfigurationError("correctness and mask matrices differ in shape")
    n_in = masks.sum(axis=0)
    n_out = masks.shape[0] - n_in
    hit_in = (correct & masks).sum(axis=0)
    hit_out = (correct & ~masks).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_in = hit_in / n_in
        p_out = hit_out / n_out
        var = p_in * (1.0 - p_in) / n_in + p_out * (1.0 - p_out) / n_out
    mem = p_in - p_out
    flags = []
    for a, b in zip(n_in, n_out):
        f = []
        if a == 0:
            f.append("no_in_models")
        if b == 0:
            f.append("no_out_models")
        flags.append(f)
    bad = (n_in == 0) | (n_out == 0)
    mem = np.where(bad, np.nan, mem)
    stderr = np.where(bad, np.nan, np.sqrt(np.where(bad, 0.0, var)))
    return ScoreTable(np.asarray(sample_ids, dtype=np.int64), mem, stderr, n_in.astype(np.int64),
                      n_out.astype(np.int64), p_in, p_out, flags)


def estimate_mem(ensemble, S):
    """Memorization scores of every sample of ``S`` under ``ensemble``."""
    if ensemble.correct.shape[1] != len(S):
        raise ConfigurationError("ensemble and dataset sizes differ")
    return scores_from_matrices(ensemble.correct, ensemble.masks.masks, S.sample_ids)


def topk_memorized(table, k):
    """The ``k`` highest-mem sample ids; ties go to the smaller id."""
    valid = np.flatnonzero(table.valid)
    if not 0 < k <= valid.size:
        raise ConfigurationError(f"k={k} but only {valid.size} valid rows")
    order = np.lexsort((table.sample_ids[valid], -table.mem[valid]))
    return [int(s) for s in table.sample_ids[valid][order[:k]]]


def estimate_mem_loo(spec, S, cfg, n_seeds, workers=1, max_m=50):
    """Exact leave-one-out scores for tiny datasets.

    For every sample ``i`` trains ``n_seeds`` models on ``S`` and on
    ``S \\ i`` (seeds shared between the two arms) and compares correctness
    on ``i``.  Cost is ``n_seeds * (m + 1)`` trainings, hence ``max_m``.
    """
    m = len(S)
    if m > max_m:
        raise ConfigurationError(f"exact leave-one-out mode limited to m <= {max_m}")
    tasks = [(spec, S, None, cfg, r) for r in range(n_seeds)]
    tasks += [(spec, S, j, cfg, r) for j in range(m) for r in range(n_seeds)]
    preds = train.map_tasks(_loo_member, tasks, workers)
    full = np.stack(preds[:n_seeds]) == S.y  # (R, m)
    correct = np.zeros((n_seeds * 2, m), dtype=bool)
    masks = np.zeros((n_seeds * 2, m), dtype=bool)
    correct[:n_seeds] = full
    masks[:n_seeds] = True
    for j in range(m):
        for r in range(n_seeds):
            correct[n_seeds + r, j] = preds[n_seeds + j * n_seeds + r][j] == S.y[j]
    return scores_from_matrices(correct, masks, S.sample_ids)


def _loo_member(args):
    spec, S, drop, cfg, r = args
    keep = np.ones(len(S), dtype=bool)
    if drop is not None:
        keep[drop] = False
    cfg_r = train.member_config(cfg, r)
    fn = train.dp_train if cfg.dp is not None else train.train
    model = fn(spec, S.subset(keep), cfg_r).model
    from curvlink import nn
    return nn.predict(model, S.X)


# ----------------------------------------------------------------------------
# memorization under DP


@dataclass
class CurvePoint:
    eps: float
    mean_mem: float
    stderr: float
    bound: float
    sigma: float = float("nan")
    n_models: int = 0
    n_valid: int = 0
    reason: str = ""


@dataclass
class MemPrivacyResult:
    points: list
    topk: list
    ensembles: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps", "mean_mem", "stderr", "bound"])
        for p in self.points:
            w.writerow([repr(p.eps), repr(p.mean_mem), repr(p.stderr), repr(p.bound)])
        return buf.getvalue()


def topk_summary(table, topk):
    """Mean mem over ``topk`` and its propagated standard error."""
    pos = {int(s): j for j, s in enumerate(table.sample_ids)}
    js = [pos[int(s)] for s in topk]
    js = [j for j in js if not math.isnan(table.mem[j])]
    if not js:
        return float("nan"), float("nan"), 0
    mem = table.mem[js]
    se = table.mem_stderr[js]
    return float(mem.mean()), float(np.sqrt(np.sum(se**2)) / len(js)), len(js)


def privacy_mem_experiment(S, topk, eps_grid, seeds_per_eps, cfg, model_spec, workers=1,
                           mask_seed=0, keep_ensembles=True):
    """Memorization of ``topk`` under DP-SGD at each budget in ``eps_grid``.

    The training set of every run is ``a`` (all samples not in ``topk``,
    always included) plus a random half of ``b = topk``.  The same masks and
    member seeds are reused at every eps, so differences between grid points
    come from the privacy level rather than from resampling.
    """
    if seeds_per_eps < 2:
        raise ConfigurationError("seeds_per_eps must be >= 2")
    b = [S.index_of(s) for s in topk]
    if len(set(b)) != len(b) or not b or len(b) >= len(S):
        raise ConfigurationError("topk must be a nonempty proper subset of distinct ids")
    core = np.setdiff1d(np.arange(len(S)), b)
    masks = data.subsample_masks(len(S), 0.5, seeds_per_eps, mask_seed, frozen_core=core)
    base_dp = cfg.dp if cfg.dp is not None else train.DpConfig(target_epsilon=1.0)
    result = MemPrivacyResult([], [int(s) for s in topk])
    for eps in eps_grid:
        eps = float(eps)
        dp = replace(base_dp, target_epsilon=eps, noise_multiplier=None)
        cfg_e = replace(cfg, dp=dp)
        bound = privacy.mem_upper_bound(eps)
        try:
            ens = train.train_ensemble(model_spec, S, masks, cfg_e, workers)
        except (CurvlinkError, ValueError, ArithmeticError) as exc:
            log.warning("eps=%g cell aborted: %s", eps, exc)
            result.points.append(CurvePoint(eps, float("nan"), float("nan"), bound, reason=str(exc)))
            continue
        table = estimate_mem(ens, S)
        mean, se, n_valid = topk_summary(table, topk)
        sigma = ens.budgets[0].sigma if ens.budgets else float("nan")
        result.points.append(CurvePoint(eps, mean, se, bound, sigma, ens.K, n_valid))
        result.tables[eps] = table
        if keep_ensembles:
            result.ensembles[eps] = ens
    return result
