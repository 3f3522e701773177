"""Empirical theory constants and bound verdicts.

The bounds relate memorization, input curvature and privacy through a set
of constants: error stability ``beta``, generalization gap ``gamma``, model
bias ``delta_bias``, Hessian Lipschitz constant ``rho``, loss bound ``L``
and the third moment ``E||alpha||^3`` of the adjacency perturbation.  None
of them can be certified from samples; every estimate here is an empirical
value (usually a max over probes) and every :class:`BoundReport` says so.

Offsets used below (m = training set size):

    c1 = rho/(6L) E||a||^3 + m beta/L + (4m-1) gamma/L + 2(m-1) Delta/L
    c2 = (4m-1) gamma + 2(m-1) Delta + rho/6 E||a||^3
    mem-vs-curvature rhs  = curv / L + c1
    privacy-curvature rhs = L (m+1) (1 - e^-eps) + c2
    loss-difference rhs   = m beta + (4m-1) gamma + 2(m-1) Delta
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from curvlink import data, nn, privacy, rng
from curvlink.errors import ConfigurationError, InsufficientModelsError, UnsupportedDatasetError

CONFIDENCE_NOTE = ("constants are empirical estimates from finite ensembles (maxima over probes), "
                   "not certified suprema; verdict allows 3 combined standard errors")


# ----------------------------------------------------------------------------
# containers


@dataclass
class TheoryConstants:
    beta: float
    gamma: float
    delta_bias: float
    rho: float
    L: float
    e_alpha3: float
    m: int
    stderr: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("beta", "gamma", "delta_bias", "rho", "e_alpha3"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not self.L > 0:
            raise ConfigurationError("L must be > 0")
        if self.m < 2:
            raise ConfigurationError("m must be >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class BoundReport:
    bound_name: str
    lhs: float
    rhs: float
    satisfied: bool
    slack: float
    confidence_note: str = CONFIDENCE_NOTE
    lhs_stderr: float = 0.0
    rhs_stderr: float = 0.0
    inputs: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _finite_or_zero(x):
    return 0.0 if x is None or not math.isfinite(x) else float(x)


def make_report(name, lhs, rhs, lhs_stderr=0.0, rhs_stderr=0.0, inputs=None, note=CONFIDENCE_NOTE):
    """Report with ``satisfied = lhs <= rhs + 3 * combined stderr``."""
    se = math.hypot(_finite_or_zero(lhs_stderr), _finite_or_zero(rhs_stderr))
    ok = bool(lhs <= rhs + 3.0 * se)
    return BoundReport(name, float(lhs), float(rhs), ok, float(rhs - lhs), note,
                       float(lhs_stderr), float(rhs_stderr), dict(inputs or {}))


# ----------------------------------------------------------------------------
# right-hand sides


def c1_offset(k, L=None):
    L = k.L if L is None else L
    if not L > 0:
        raise ConfigurationError("L must be > 0")
    m = k.m
    return (k.rho / (6.0 * L) * k.e_alpha3 + m * k.beta / L + (4 * m - 1) * k.gamma / L
            + 2 * (m - 1) * k.delta_bias / L)


def c2_offset(k):
    m = k.m
    return (4 * m - 1) * k.gamma + 2 * (m - 1) * k.delta_bias + k.rho / 6.0 * k.e_alpha3


def thm1_rhs(curv_i, k, cross_entropy=False):
    """``curv / L + c1``; the cross-entropy variant uses ``L = 1``."""
    L = 1.0 if cross_entropy else k.L
    if not L > 0:
        raise ConfigurationError("L must be > 0")
    return curv_i / L + c1_offset(k, L)


def thm2_rhs(k, eps):
    if eps < 0:
        raise ConfigurationError("eps must be >= 0")
    return k.L * (k.m + 1) * -math.expm1(-eps) + c2_offset(k)


def lossdiff_rhs(k):
    m = k.m
    return m * k.beta + (4 * m - 1) * k.gamma + 2 * (m - 1) * k.delta_bias


def curv_intermediate_rhs(k, loss_gap):
    """Curvature-intermediate bound for a given ``E l(h_S, z_j) - E l(h_S\\i, z_j)``."""
    return lossdiff_rhs(k) + k.rho / 6.0 * k.e_alpha3 + loss_gap


_FORMULAS = {
    "thm1": lambda k, a: thm1_rhs(a["curv"], k, a.get("cross_entropy", False)),
    "thm2": lambda k, a: thm2_rhs(k, a["eps"]),
    "lossdiff": lambda k, a: lossdiff_rhs(k),
    "curv_intermediate": lambda k, a: curv_intermediate_rhs(k, a["loss_gap"]),
    "lemma1": lambda k, a: privacy.stability_bound(a["L"], a["eps"]),
    "thm3": lambda k, a: privacy.mem_upper_bound(a["eps"]),
}


def replay_rhs(report, constants):
    """Recompute a report's rhs from serialized constants (audit replay)."""
    rep = report if isinstance(report, dict) else report.to_dict()
    k = constants if isinstance(constants, TheoryConstants) else TheoryConstants.from_dict(constants)
    return _FORMULAS[rep["inputs"]["formula"]](k, rep["inputs"])


# ----------------------------------------------------------------------------
# estimators


def model_losses(models, X, y):
    """``(K, n)`` matrix of per-sample losses."""
    return np.stack([nn.losses(mdl, X, y) for mdl in models])


def model_errors(models, X, y):
    return np.stack([nn.predict(mdl, X) != y for mdl in models]).astype(np.float64)


def _boot_se(stat_fn, K, seed, n_boot=200, purpose="boot"):
    g = rng.stream(seed, purpose)
    vals = []
    for _ in range(n_boot):
        v = stat_fn(g.integers(0, K, size=K))
        if v is not None and math.isfinite(v):
            vals.append(v)
    return float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")


@dataclass
class BetaEstimate:
    beta: float
    stderr: float
    per_probe: dict
    mode: str


def estimate_beta(ens_S, ens_Si, holdout, S=None, probe_ids=None, seed=0, n_boot=200):
    """Error stability: largest change of mean holdout loss when ``i`` is removed.

    * exact mode: ``ens_Si`` is an ensemble trained on ``S \\ i`` (or a dict
      ``{i: ensemble}``) and ``ens_S`` one trained on ``S``;
    * split mode: ``ens_Si`` is None and each probe ``i`` splits ``ens_S``
      into models that did and did not train on it (needs ``S`` and
      ``probe_ids``).

    The standard error is a bootstrap over models of the max statistic.
    """
    if holdout is None or len(holdout) == 0:
        raise ConfigurationError("empty holdout")
    loss_S = model_losses(ens_S.models, holdout.X, holdout.y).mean(axis=1)
    if ens_Si is None:
        if S is None or probe_ids is None:
            raise ConfigurationError("split mode needs S and probe_ids")
        all_ids = [int(i) for i in probe_ids]
        inc = ens_S.masks.masks[:, [S.index_of(i) for i in all_ids]]
        n_in = inc.sum(axis=0)
        usable = (n_in > 0) & (n_in < ens_S.K)
        if not usable.any():
            raise InsufficientModelsError("no probe has both in- and out-models",
                                          counts={"in": n_in.tolist(), "K": ens_S.K})
        # probes every model (or no model) trained on carry no information
        probe_ids = [i for i, u in zip(all_ids, usable) if u]
        inc = inc[:, usable]

        def diffs(idx):
            lk, ik = loss_S[idx], inc[idx]
            a, b = ik.sum(axis=0), (~ik).sum(axis=0)
            if np.any(a == 0) or np.any(b == 0):
                return None
            return (lk @ ik) / a - (lk @ ~ik) / b

        d = diffs(np.arange(ens_S.K))
        beta = float(np.max(np.abs(d)))

        def stat(idx):
            dd = diffs(idx)
            return None if dd is None else float(np.max(np.abs(dd)))

        se = _boot_se(stat, ens_S.K, seed, n_boot, "beta-boot")
        per = {i: float("nan") for i in all_ids}
        per.update({int(i): float(v) for i, v in zip(probe_ids, d)})
        return BetaEstimate(beta, se, per, "split")

    others = ens_Si if isinstance(ens_Si, dict) else {None: ens_Si}
    per, ses = {}, {}
    for key, ens in others.items():
        loss_i = model_losses(ens.models, holdout.X, holdout.y).mean(axis=1)
        per[key] = float(loss_S.mean() - loss_i.mean())
        ses[key] = math.sqrt(np.var(loss_S, ddof=1) / len(loss_S) + np.var(loss_i, ddof=1) / len(loss_i))
    worst = max(per, key=lambda k: abs(per[k]))
    return BetaEstimate(abs(per[worst]), ses[worst], per, "exact")


def estimate_gamma(ensemble, S, holdout, loss="model"):
    """Mean over models of ``|train loss - holdout loss|``.

    The train loss of model ``k`` is averaged over the samples its mask
    included.  ``loss`` is ``"model"`` (the model's own loss) or ``"zero_one"``.
    """
    if holdout is None or len(holdout) == 0:
        raise ConfigurationError("empty holdout")
    fn = model_losses if loss == "model" else model_errors
    tr = fn(ensemble.models, S.X, S.y)
    ho = fn(ensemble.models, holdout.X, holdout.y).mean(axis=1)
    masks = ensemble.masks.masks
    train_loss = (tr * masks).sum(axis=1) / masks.sum(axis=1)
    gaps = np.abs(train_loss - ho)
    se = float(gaps.std(ddof=1) / math.sqrt(len(gaps))) if len(gaps) > 1 else float("nan")
    return float(gaps.mean()), se


def estimate_delta(ensemble, holdout, bayes):
    """``|mean holdout 0-1 risk - Bayes risk|``."""
    if bayes is None:
        raise UnsupportedDatasetError("dataset has no known Bayes risk")
    if holdout is None or len(holdout) == 0:
        raise ConfigurationError("empty holdout")
    bayes_se = 0.0
    if isinstance(bayes, (tuple, list)):
        bayes, bayes_se = bayes
    risks = model_errors(ensemble.models, holdout.X, holdout.y).mean(axis=1)
    se = float(risks.std(ddof=1) / math.sqrt(len(risks))) if len(risks) > 1 else 0.0
    return float(abs(risks.mean() - bayes)), math.hypot(se, bayes_se)


@dataclass
class RhoEstimate:
    rho: float
    running_max: list
    n_skipped: int


def estimate_rho(models, S, n_pairs, seed=0):
    """Largest ``||H(z1) - H(z2)||_F / ||x1 - x2||`` over random triples.

    Pairs are drawn within a class so that both examples share the label and
    the distance is between inputs only.  This is an empirical lower
    estimate of the Lipschitz constant.
    """
    if not models:
        raise ConfigurationError("no models")
    g = rng.stream(seed, "rho-pairs")
    by_class = [np.flatnonzero(S.y == c) for c in range(S.n_classes)]
    by_class = [c for c in by_class if len(c) >= 2]
    if not by_class:
        raise ConfigurationError("no class has two samples")
    best, running, skipped = 0.0, [], 0
    for _ in range(n_pairs):
        mdl = models[int(g.integers(len(models)))]
        members = by_class[int(g.integers(len(by_class)))]
        i, j = g.choice(members, size=2, replace=False)
        dist = float(np.linalg.norm(S.X[i] - S.X[j]))
        if dist < 1e-9:
            skipped += 1
            running.append(best)
            continue
        H1 = nn.exact_input_hessian(mdl, S.example(int(i)))
        H2 = nn.exact_input_hessian(mdl, S.example(int(j)))
        best = max(best, float(np.linalg.norm(H1 - H2) / dist))
        running.append(best)
    return RhoEstimate(best, running, skipped)


def chi_third_moment(d, sigma):
    """``E||a||^3`` for ``a ~ N(0, sigma^2 I_d)`` (no truncation)."""
    return float(sigma**3 * 2.0**1.5 * math.exp(gammaln((d + 3) / 2.0) - gammaln(d / 2.0)))


def estimate_e_alpha3(d, mode="gaussian", upsilon=None, sigma=None, n=10_000, seed=0):
    """Monte-Carlo ``E||alpha||^3`` for the adjacency perturbation in use."""
    a = data.draw_alpha(d, mode, upsilon=upsilon, sigma=sigma, seed=seed, count=n)
    r3 = np.linalg.norm(a, axis=1) ** 3
    return float(r3.mean()), float(r3.std(ddof=1) / math.sqrt(n))


def converged_losses(ensemble, S):
    """Per-model training losses on each model's own training samples."""
    L = model_losses(ensemble.models, S.X, S.y)
    return [L[k, ensemble.masks.masks[k]] for k in range(ensemble.K)]


def loss_bound(ensemble, S):
    """Empirical loss bound: largest converged per-sample training loss."""
    return float(max(l.max() for l in converged_losses(ensemble, S)))


def mean_converged_loss(ensemble, S):
    vals = np.array([l.mean() for l in converged_losses(ensemble, S)])
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")
    return float(vals.mean()), se


def stratified_probes(table, n=16, seed=0):
    """One sample id from each of ``n`` equal-size strata of the mem ranking."""
    valid = np.flatnonzero(table.valid)
    if valid.size == 0:
        raise ConfigurationError("no valid rows to probe")
    order = valid[np.lexsort((table.sample_ids[valid], table.mem[valid]))]
    n = min(n, order.size)
    g = rng.stream(seed, "probes")
    return [int(table.sample_ids[g.choice(chunk)]) for chunk in np.array_split(order, n)]


# ----------------------------------------------------------------------------
# checks


def appendix_lossdiff_check(ens_S, ens_Si, S, k, probe_ids):
    """Largest ``|E l(h_S, z_i) - E l(h_S\\i, z_j)|`` over probe pairs vs its bound.

    With ``ens_Si`` None the split of ``ens_S`` by inclusion of ``i`` stands
    in for the two training sets; otherwise ``ens_Si`` maps each probe id to
    an ensemble trained without it.
    """
    cols = [S.index_of(i) for i in probe_ids]
    X, y = S.X[cols], S.y[cols]
    worst, worst_se, where = 0.0, 0.0, None
    loss_S = model_losses(ens_S.models, X, y)
    for a, i in enumerate(probe_ids):
        if ens_Si is None:
            inc = ens_S.masks.masks[:, cols[a]]
            if inc.all() or not inc.any():
                raise InsufficientModelsError(f"probe {i} lacks in- or out-models")
            with_i, without_i = loss_S[inc], loss_S[~inc]
        else:
            with_i = loss_S
            without_i = model_losses(ens_Si[i].models, X, y)
        for b in range(len(probe_ids)):
            diff = with_i[:, a].mean() - without_i[:, b].mean()
            if abs(diff) >= worst:
                se = math.sqrt(np.var(with_i[:, a], ddof=1) / len(with_i)
                               + np.var(without_i[:, b], ddof=1) / len(without_i))
                worst, worst_se, where = abs(diff), se, (int(i), int(probe_ids[b]))
    return make_report("lossdiff", worst, lossdiff_rhs(k), worst_se, 0.0,
                       {"formula": "lossdiff", "pair": where})


def curvature_intermediate_check(ensemble, S, k, probe_ids):
    """Largest mean ``tr H(z_i)`` (models holding ``i``) vs the smallest rhs over ``j``."""
    cols = [S.index_of(i) for i in probe_ids]
    X, y = S.X[cols], S.y[cols]
    losses = model_losses(ensemble.models, X, y)
    lhs, lhs_se, rhs, where = -math.inf, 0.0, math.inf, None
    for a, i in enumerate(probe_ids):
        inc = ensemble.masks.masks[:, cols[a]]
        if inc.all() or not inc.any():
            raise InsufficientModelsError(f"probe {i} lacks in- or out-models")
        traces = np.array([np.trace(nn.exact_input_hessian(ensemble.models[kk], S.example(cols[a])))
                           for kk in np.flatnonzero(inc)])
        if traces.mean() > lhs:
            lhs = float(traces.mean())
            lhs_se = float(traces.std(ddof=1) / math.sqrt(len(traces))) if len(traces) > 1 else 0.0
        for b in range(len(probe_ids)):
            gap = losses[inc, b].mean() - losses[~inc, b].mean()
            r = curv_intermediate_rhs(k, gap)
            if r < rhs:
                rhs, where = r, (int(i), int(probe_ids[b]), float(gap))
    return make_report("curv_intermediate", lhs, rhs, lhs_se, 0.0,
                       {"formula": "curv_intermediate", "loss_gap": where[2], "pair": where[:2]})


def lemma1_check(beta, L, eps):
    """Stability estimate vs ``L (1 - e^-eps)``; also records the older bound."""
    rhs = privacy.stability_bound(L, eps)
    prior = privacy.prior_stability_bound(L, eps)
    rep = make_report("lemma1", beta.beta, rhs, beta.stderr, 0.0,
                      {"formula": "lemma1", "L": float(L), "eps": float(eps),
                       "prior_bound": prior, "improves_prior": bool(rhs < prior) if eps > 0 else None})
    return rep


def thm2_check(mean_curv, curv_stderr, k, eps):
    return make_report("thm2", mean_curv, thm2_rhs(k, eps), curv_stderr, 0.0,
                       {"formula": "thm2", "eps": float(eps)})


def thm3_check(mean_mem, stderr, eps):
    return make_report("thm3", mean_mem, privacy.mem_upper_bound(eps), stderr, 0.0,
                       {"formula": "thm3", "eps": float(eps)})


def thm1_bin_reports(bins, k, cross_entropy=True):
    """One report per nonempty bin: mean |mem| vs rhs at the bin's max curvature."""
    out = []
    for b in bins:
        if b.count == 0:
            continue
        rhs = thm1_rhs(b.max_curv, k, cross_entropy)
        out.append(make_report(f"thm1_bin{b.bin_index}", b.mean_mem, rhs, 0.0, 0.0,
                               {"formula": "thm1", "curv": float(b.max_curv),
                                "cross_entropy": bool(cross_entropy)}))
    return out


def verification_json(constants, reports, extra=None):
    doc = {"constants": constants.to_dict() if constants is not None else None,
           "reports": [r.to_dict() for r in reports],
           "all_satisfied": all(r.satisfied for r in reports)}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
