"""End-to-end experiment recipes built from the library modules.

Each step takes a resolved run configuration (see :mod:`curvlink.config`)
and returns plain objects; :func:`verify` chains all of them and
:func:`write_verify` turns the result into the files of a run directory.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from curvlink import config as C
from curvlink import curvature, data, fit, memorization, theory, train

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# building blocks


def build_data(cfg):
    """Training set (with Monte-Carlo Bayes risk) and an i.i.d. holdout."""
    spec = C.genspec(cfg)
    d = cfg["data"]
    risk, risk_se = data.bayes_risk(spec, int(d["bayes_mc"]), C.seed_for(cfg, "data", "seed") ^ 0x5EED)
    S = data.with_bayes_risk(data.generate(spec), risk)
    hold = data.generate_holdout(spec, int(d["n_holdout"]), C.experiment_seed(cfg, "mask_seed") ^ 0x401D)
    hold = data.with_bayes_risk(hold, risk)
    return S, hold, risk_se


def nonprivate_masks(cfg, m):
    ex = cfg["experiment"]
    return data.subsample_masks(m, float(ex["ratio"]), int(ex["K"]), C.experiment_seed(cfg, "mask_seed"))


def nonprivate_ensemble(cfg, S, workers=1):
    return train.train_ensemble(C.model_spec(cfg), S, nonprivate_masks(cfg, len(S)), C.train_config(cfg),
                                workers)


def alpha_moment(cfg):
    ex = cfg["experiment"]
    return theory.estimate_e_alpha3(int(cfg["data"]["dim"]), ex["alpha_mode"], upsilon=ex["upsilon"],
                                    sigma=ex["alpha_sigma"], n=int(ex["alpha_mc"]),
                                    seed=C.experiment_seed(cfg, "mask_seed") ^ 0xA1FA)


def estimate_constants(cfg, ens, S, holdout, risk_se, probes, rho_pairs=None, L=None, e3=None, beta=None):
    """All theory constants from one ensemble; returns ``(constants, beta)``.

    A given ``beta`` (estimated elsewhere) is used as is; full-data ensembles
    have no leave-out members to estimate it from.
    """
    ex = cfg["experiment"]
    if beta is None and probes:
        beta = theory.estimate_beta(ens, None, holdout, S=S, probe_ids=probes,
                                    seed=C.experiment_seed(cfg, "mask_seed"))
    elif beta is None:
        beta = theory.BetaEstimate(0.0, float("nan"), {}, "not-estimated")
    gamma, gamma_se = theory.estimate_gamma(ens, S, holdout)
    delta, delta_se = theory.estimate_delta(ens, holdout, (S.bayes_risk, risk_se))
    n_pairs = int(ex["rho_pairs"]) if rho_pairs is None else rho_pairs
    rho = theory.estimate_rho(ens.models, S, n_pairs, C.experiment_seed(cfg, "mask_seed"))
    if e3 is None:
        e3 = alpha_moment(cfg)
    if L is None:
        L = theory.loss_bound(ens, S)
    k = theory.TheoryConstants(
        beta=beta.beta, gamma=gamma, delta_bias=delta, rho=rho.rho, L=L, e_alpha3=e3[0], m=len(S),
        stderr={"beta": beta.stderr, "gamma": gamma_se, "delta_bias": delta_se, "e_alpha3": e3[1]},
        meta={"beta_mode": beta.mode, "beta_probes": [int(p) for p in probes], "rho_pairs": n_pairs,
              "rho_skipped": rho.n_skipped, "L_source": "max converged per-sample training loss",
              "alpha_mode": ex["alpha_mode"], "delta_loss": "zero-one risk vs Bayes risk",
              "gamma_loss": "model loss, own training subset vs holdout"})
    return k, beta


@dataclass
class MemCurvResult:
    table: memorization.ScoreTable
    curv: curvature.CurvTable
    bins: list
    fits: fit.MemCurvFit
    corr: dict


def mem_curv_analysis(cfg, ens, S, workers=1):
    """Memorization table with ``E[Curv(z_i, S \\ i)]``, bins, fits and correlation."""
    table = memorization.estimate_mem(ens, S)
    curv = curvature.ensemble_curvature(ens, S, C.curv_params(cfg), "excluding_i", workers)
    table = table.with_curvature(curv)
    bins = fit.bin_scores(table, int(cfg["experiment"]["n_bins"]))
    fits = fit.fit_mem_vs_curv(bins)
    full = [b for b in bins if b.count > 0 and b.max_curv is not None]
    corr = fit.correlation([b.max_curv for b in full], [b.mean_mem for b in full])
    return MemCurvResult(table, curv, bins, fits, corr)


@dataclass
class PrivacyCell:
    """Calibrated-noise DP ensemble at one eps (memorization, stability)."""
    eps: float
    sigma: float
    steps: int
    achieved_eps: float
    mean_mem: float
    mem_se: float
    loss_bound: float
    beta: theory.BetaEstimate
    reports: list = field(default_factory=list)


def privacy_cell(cfg, eps, ens, S, holdout, topk, mean_mem, mem_se):
    """Lemma 1 and Theorem 3 checks for the mem-privacy models at one eps."""
    n_probe = min(int(cfg["experiment"]["n_probes"]), len(topk))
    beta = theory.estimate_beta(ens, None, holdout, S=S, probe_ids=list(topk[:n_probe]),
                                seed=C.experiment_seed(cfg, "dp_mask_seed"))
    L = theory.loss_bound(ens, S)
    b = ens.budgets
    reports = [theory.lemma1_check(beta, L, eps), theory.thm3_check(mean_mem, mem_se, eps)]
    return PrivacyCell(eps, b[0].sigma, b[0].steps, max(x.epsilon for x in b), mean_mem, mem_se, L, beta,
                       reports)


def dp_mem_privacy(cfg, S, topk, workers=1):
    ex = cfg["experiment"]
    return memorization.privacy_mem_experiment(
        S, topk, ex["eps_grid"], int(ex["seeds_per_eps"]), C.train_config(cfg, dp=True, eps=1.0),
        C.model_spec(cfg), workers, mask_seed=C.experiment_seed(cfg, "dp_mask_seed"))


@dataclass
class SweepCell:
    """Budget-truncated DP models on all of S at one eps (curvature, loss)."""
    eps: float
    sigma: float
    steps: int
    achieved_eps: float
    mean_loss: float
    mean_loss_se: float
    loss_bound: float
    mean_curv: float
    curv_se: float
    constants: theory.TheoryConstants
    reports: list = field(default_factory=list)


def sweep_ensembles(cfg, S, workers=1):
    """One ensemble of ``dp_sweep.n_seeds`` full-data models per eps.

    The noise multiplier is calibrated once so the whole schedule spends the
    largest eps of the grid; smaller budgets reuse it and stop early.  Member
    seeds (hence noise draws) are shared across eps, so a run at a smaller
    eps is a prefix of the run at a larger one.
    """
    eps_grid = [float(e) for e in cfg["experiment"]["eps_grid"]]
    sigma, caps = train.budget_truncation(len(S), C.sweep_config(cfg), eps_grid)
    masks = data.subsample_masks(len(S), 0.5, int(cfg["dp_sweep"]["n_seeds"]),
                                 C.seed_for(cfg, "dp_sweep"), frozen_core=range(len(S)))
    spec = C.model_spec(cfg)
    out = {}
    for eps in eps_grid:
        out[eps] = train.train_ensemble(spec, S, masks, C.sweep_config(cfg, sigma, caps[eps]), workers)
    return sigma, caps, out


def sweep_cell(cfg, eps, ens, S, holdout, risk_se, e3, beta, workers=1):
    """Mean curvature over all samples and models, loss bound and Theorem 2."""
    _, scores = curvature.curvature_matrix(ens, S, C.curv_params(cfg), "all", workers)
    per_model = scores.mean(axis=1)
    mean_curv = float(per_model.mean())
    curv_se = float(per_model.std(ddof=1) / math.sqrt(len(per_model)))
    mean_loss, mean_loss_se = theory.mean_converged_loss(ens, S)
    L = theory.loss_bound(ens, S)
    rho_pairs = max(1, int(cfg["experiment"]["rho_pairs"]) // 4)
    k, _ = estimate_constants(cfg, ens, S, holdout, risk_se, [], rho_pairs, L, e3, beta=beta)
    b = ens.budgets
    return SweepCell(eps, b[0].sigma, b[0].steps, max(x.epsilon for x in b), mean_loss, mean_loss_se, L,
                     mean_curv, curv_se, k, [theory.thm2_check(mean_curv, curv_se, k, eps)])


@dataclass
class SweepFits:
    loss: fit.FitResult
    curv_fixed: fit.FitResult
    curv_free: fit.FitResult
    mem_corr: dict
    curv_corr: dict


def sweep_fits(cells, pcells, m):
    """L(eps) on the loss bounds, the curvature model in both scalings, trends."""
    loss = fit.fit_loss_vs_eps([(c.eps, c.loss_bound) for c in cells])
    pts = [(c.eps, c.mean_curv) for c in cells]
    return SweepFits(loss, fit.fit_curv_vs_eps(pts, m, loss, scale="fixed"),
                     fit.fit_curv_vs_eps(pts, m, loss, scale="free"),
                     fit.correlation([c.eps for c in pcells], [c.mean_mem for c in pcells])
                     if len(pcells) >= 3 else None,
                     fit.correlation([c.eps for c in cells], [c.mean_curv for c in cells]))


# ----------------------------------------------------------------------------
# full verification


@dataclass
class VerifyResult:
    cfg: dict
    S: data.Dataset
    holdout: data.Dataset
    risk_se: float
    ensemble: train.EnsembleRecord
    memcurv: MemCurvResult
    constants: theory.TheoryConstants
    beta: theory.BetaEstimate
    probes: list
    topk: list
    mem_privacy: memorization.MemPrivacyResult
    pcells: list
    sweep_sigma: float
    sweep_steps: dict
    cells: list
    sweep: SweepFits
    reports: list


def verify(cfg, workers=1):
    """Train everything the checks need and evaluate every bound."""
    S, holdout, risk_se = build_data(cfg)
    log.info("data: m=%d, bayes risk %.4f", len(S), S.bayes_risk)
    ens = nonprivate_ensemble(cfg, S, workers)
    log.info("trained %d non-private models", ens.K)
    mc = mem_curv_analysis(cfg, ens, S, workers)
    ex = cfg["experiment"]
    probes = theory.stratified_probes(mc.table, int(ex["n_probes"]), C.experiment_seed(cfg, "mask_seed"))
    e3 = alpha_moment(cfg)
    k, beta = estimate_constants(cfg, ens, S, holdout, risk_se, probes, e3=e3)
    reports = theory.thm1_bin_reports(mc.bins, k, cross_entropy=True)
    reports.append(theory.appendix_lossdiff_check(ens, None, S, k, probes))
    reports.append(theory.curvature_intermediate_check(ens, S, k, probes))

    topk = memorization.topk_memorized(mc.table, int(ex["top_k"]))
    mp = dp_mem_privacy(cfg, S, topk, workers)
    pcells = []
    for pt in mp.points:
        if pt.eps not in mp.ensembles:
            log.warning("eps=%g skipped: %s", pt.eps, pt.reason)
            continue
        pc = privacy_cell(cfg, pt.eps, mp.ensembles[pt.eps], S, holdout, topk, pt.mean_mem, pt.stderr)
        pcells.append(pc)
        reports.extend(pc.reports)
        log.info("eps=%g: top-k mem %.3f beta %.4f", pt.eps, pt.mean_mem, pc.beta.beta)

    sigma, caps, sweep_ens = sweep_ensembles(cfg, S, workers)
    betas = {pc.eps: pc.beta for pc in pcells}
    cells = []
    for eps, e in sweep_ens.items():
        cell = sweep_cell(cfg, eps, e, S, holdout, risk_se, e3, betas.get(eps), workers)
        cells.append(cell)
        reports.extend(cell.reports)
        log.info("eps=%g: %d steps, curv %.4g, loss bound %.3f", eps, cell.steps, cell.mean_curv, cell.loss_bound)
    sweep = sweep_fits(cells, pcells, len(S)) if len(cells) >= 4 else None
    return VerifyResult(cfg, S, holdout, risk_se, ens, mc, k, beta, probes, topk, mp, pcells, sigma, caps,
                        cells, sweep, reports)


# ----------------------------------------------------------------------------
# files


def _jdump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=theory._json_default) + "\n"


def _csv_with_digest(text, cfg_digest):
    return f"# config_digest={cfg_digest}\n" + text


def fig4_rows(mc):
    f = mc.fits
    rows = []
    it = iter(range(len(f.y)))
    for b in mc.bins:
        if b.count > 0 and b.max_curv is not None:
            j = next(it)
            xs, xu = f.x_scaled[j], f.x_unscaled[j]
            rows.append([b.bin_index, b.mem_lo, b.mem_hi, b.count, b.mean_mem, b.max_curv, xs,
                         f.scaled.params["p1"] * xs + f.scaled.params["c1"],
                         f.unscaled.params["p1"] * xu + f.unscaled.params["c1"]])
        else:
            rows.append([b.bin_index, b.mem_lo, b.mem_hi, b.count, b.mean_mem, b.max_curv, None, None, None])
    return rows


FIG4_COLS = ["bin_index", "mem_lo", "mem_hi", "count", "mean_mem", "max_curv", "sqrt_msub_max_curv",
             "fit_scaled", "fit_unscaled"]
FIG6_COLS = ["eps", "steps", "mean_loss", "loss_stderr", "loss_bound", "fit_loss_bound"]
FIG7_COLS = ["eps", "steps", "mean_curv", "curv_stderr", "fit", "residual", "fit_free_scale", "thm2_rhs"]
FIG8_COLS = ["eps", "mean_mem", "stderr", "bound"]


def write_verify(res, run_dir, cfg_digest):
    """Write every data file of a verify run; returns the relative paths."""
    files = {}

    def put(name, text):
        with open(os.path.join(run_dir, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        files[name] = True

    note = [f"config_digest: {cfg_digest}"]
    put("data.csv", _csv_with_digest(data.to_csv(res.S), cfg_digest))
    put("data.json", _jdump(dict(data.sidecar(res.S), config_digest=cfg_digest)))
    put("holdout.csv", _csv_with_digest(data.to_csv(res.holdout), cfg_digest))
    put("scores.csv", _csv_with_digest(res.memcurv.table.to_csv(), cfg_digest))
    put("curvature.csv", _csv_with_digest(res.memcurv.curv.to_csv(), cfg_digest))
    put("fig4_memcurv.dat", fit.dat_text(FIG4_COLS, fig4_rows(res.memcurv), note))
    put("mem_privacy.csv", _csv_with_digest(res.mem_privacy.to_csv(), cfg_digest))
    put("fig8_memeps.dat", fit.dat_text(FIG8_COLS, [[p.eps, p.mean_mem, p.stderr, p.bound]
                                                    for p in res.mem_privacy.points], note))
    fits = {"config_digest": cfg_digest, "mem_vs_curv": {"scaled": res.memcurv.fits.scaled.to_dict(),
                                                         "unscaled": res.memcurv.fits.unscaled.to_dict(),
                                                         "correlation": res.memcurv.corr}}
    if res.sweep is not None:
        sw = res.sweep
        eps = np.array([c.eps for c in res.cells])
        lfit = fit.loss_curve(sw.loss, eps)
        put("fig6_losseps.dat", fit.dat_text(FIG6_COLS, [[c.eps, c.steps, c.mean_loss, c.mean_loss_se, c.loss_bound, f]
                                                         for c, f in zip(res.cells, lfit)], note))
        g = fit.curv_model_term(eps, len(res.S), sw.loss)
        fixed = g + sw.curv_fixed.params["c2"]
        free = sw.curv_free.params["k"] * g + sw.curv_free.params["c2"]
        put("fig7_curveps.dat", fit.dat_text(
            FIG7_COLS, [[c.eps, c.steps, c.mean_curv, c.curv_se, a, c.mean_curv - a, b,
                         theory.thm2_rhs(c.constants, c.eps)]
                        for c, a, b in zip(res.cells, fixed, free)], note))
        fits.update({"loss_vs_eps": sw.loss.to_dict(), "curv_vs_eps": sw.curv_fixed.to_dict(),
                     "curv_vs_eps_free_scale": sw.curv_free.to_dict(), "mem_vs_eps_correlation": sw.mem_corr,
                     "curv_vs_eps_correlation": sw.curv_corr})
    put("fits.json", _jdump(fits))
    privacy_doc = [{"eps": c.eps, "sigma": c.sigma, "steps": c.steps, "achieved_eps": c.achieved_eps,
                    "mean_mem": c.mean_mem, "mem_stderr": c.mem_se, "loss_bound": c.loss_bound,
                    "beta": c.beta.beta, "beta_stderr": c.beta.stderr, "beta_per_probe": c.beta.per_probe}
                   for c in res.pcells]
    sweep_doc = {"sigma": res.sweep_sigma, "steps": {repr(k): v for k, v in res.sweep_steps.items()},
                 "cells": [{"eps": c.eps, "steps": c.steps, "achieved_eps": c.achieved_eps,
                            "mean_loss": c.mean_loss, "loss_bound": c.loss_bound, "mean_curv": c.mean_curv,
                            "curv_stderr": c.curv_se, "constants": c.constants.to_dict()}
                           for c in res.cells]}
    put("verification.json", theory.verification_json(
        res.constants, res.reports,
        {"config_digest": cfg_digest, "verdicts": verdicts(res), "mem_privacy": privacy_doc,
         "dp_sweep": sweep_doc, "topk": res.topk, "probes": res.probes,
         "beta_per_probe": res.beta.per_probe}))
    return sorted(files)


def verdicts(res):
    """Per-statement pass/fail summary used by the report."""
    out = {}
    thm1 = [r for r in res.reports if r.bound_name.startswith("thm1_bin")]
    out["thm1"] = {"bins_satisfied": sum(r.satisfied for r in thm1), "bins": len(thm1),
                   "pearson": res.memcurv.corr["pearson"],
                   "p1": res.memcurv.fits.scaled.params["p1"],
                   "scaled_sse": res.memcurv.fits.scaled.residual_sse,
                   "unscaled_sse": res.memcurv.fits.unscaled.residual_sse}
    for name in ("thm2", "lemma1", "thm3"):
        rs = [r for r in res.reports if r.bound_name == name]
        out[name] = {"satisfied": all(r.satisfied for r in rs), "cells": len(rs)}
    if res.sweep is not None:
        out["thm2"]["curv_spearman"] = res.sweep.curv_corr["spearman"]
        out["thm2"]["fit_r_squared"] = res.sweep.curv_fixed.r_squared
        out["thm2"]["fit_r_squared_free_scale"] = res.sweep.curv_free.r_squared
        out["thm3"]["mem_spearman"] = res.sweep.mem_corr["spearman"]
    for name in ("lossdiff", "curv_intermediate"):
        rs = [r for r in res.reports if r.bound_name == name]
        out[name] = {"satisfied": all(r.satisfied for r in rs)}
    return out
