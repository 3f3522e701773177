"""Command-line entry point: ``curvlink <subcommand> [options]``.

Every subcommand resolves a configuration (preset < ``--config`` file <
flags), validates it before touching the disk, then writes its outputs and
a ``manifest.json`` into ``<output_dir>/<run_id>``.

Exit codes: 0 success, 1 invalid configuration or input, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
import traceback

import numpy as np

from curvlink import __version__
from curvlink import config as C
from curvlink import curvature, data, fit, memorization, nn, pipeline, theory, train
from curvlink.errors import ConfigurationError, CurvlinkError, NumericError

log = logging.getLogger("curvlink")

COMMANDS = ("gen-data", "train", "train-ensemble", "dp-sweep", "curvature", "memorization", "mem-privacy",
            "verify", "fit", "report")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """A run directory plus the bookkeeping that ends up in its manifest."""

    def __init__(self, command, cfg, workers, inputs=()):
        self.command = command
        self.cfg = cfg
        self.digest = C.digest(cfg)
        self.run_id = cfg["run_id"] or f"{command}-{self.digest[:10]}"
        self.dir = os.path.join(cfg["output_dir"], self.run_id)
        self.workers = workers
        self.inputs = list(inputs)
        self.files = []
        self.extra = {}

    def open(self):
        if os.path.isdir(self.dir) and os.listdir(self.dir):
            raise ConfigurationError(f"run directory {self.dir} exists and is not empty")
        os.makedirs(self.dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.dir, name)

    def write(self, name, text):
        full = self.path(name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        with open(full, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.files.append(name)

    def write_bytes(self, name, blob):
        full = self.path(name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        with open(full, "wb") as fh:
            fh.write(blob)
        self.files.append(name)

    def csv(self, name, text):
        self.write(name, f"# config_digest={self.digest}\n" + text)

    def json(self, name, obj):
        doc = dict(obj)
        doc.setdefault("config_digest", self.digest)
        self.write(name, json.dumps(doc, indent=2, sort_keys=True, default=theory._json_default) + "\n")

    def manifest(self, status, exit_code, started, wall, error=None):
        doc = {
            "command": self.command,
            "run_id": self.run_id,
            "library_version": __version__,
            "config": self.cfg,
            "config_digest": self.digest,
            "workers": self.workers,
            "inputs": {p: _sha256(p) for p in self.inputs if os.path.isfile(p)},
            "outputs": {f: _sha256(self.path(f)) for f in sorted(set(self.files))},
            "started_at": started,
            "wall_time_s": wall,
            "status": status,
            "exit_code": exit_code,
            "error": error,
        }
        doc.update(self.extra)
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=theory._json_default)
            fh.write("\n")


# ----------------------------------------------------------------------------
# shared loaders


def _dataset(run, cfg):
    S, hold, risk_se = pipeline.build_data(cfg)
    return S, hold, risk_se


def _save_data(run, S, hold):
    run.csv("data.csv", data.to_csv(S))
    run.json("data.json", data.sidecar(S))
    run.csv("holdout.csv", data.to_csv(hold))
    run.json("holdout.json", data.sidecar(hold))


def save_ensemble(run, ens, prefix="ensemble"):
    masks = ens.masks.masks
    lines = ["mask_id," + ",".join(f"m{i}" for i in range(masks.shape[1]))]
    lines += [ens.masks.mask_id(k) + "," + ",".join("1" if v else "0" for v in row)
              for k, row in enumerate(masks)]
    run.csv(f"{prefix}/masks.csv", "\n".join(lines) + "\n")
    for k, model in enumerate(ens.models):
        run.write_bytes(f"{prefix}/models/model_{k:04d}.crvl", nn.to_bytes(model))
    run.write_bytes(f"{prefix}/correct.bin", np.packbits(ens.correct, axis=None).tobytes())
    run.json(f"{prefix}/ensemble.json", {
        "K": ens.K, "m": int(masks.shape[1]), "ratio": ens.masks.ratio, "mask_seed": ens.masks.seed,
        "frozen_core": list(ens.masks.frozen_core), "config_digest_train": ens.config_digest,
        "budgets": [b.to_dict() for b in ens.budgets], "histories": ens.histories})


def load_ensemble(run_dir, prefix="ensemble"):
    base = os.path.join(run_dir, prefix)
    with open(os.path.join(base, "ensemble.json")) as fh:
        meta = json.load(fh)
    K, m = meta["K"], meta["m"]
    rows = []
    with open(os.path.join(base, "masks.csv")) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("mask_id"):
                continue
            rows.append([c == "1" for c in line.strip().split(",")[1:]])
    masks = data.MaskSet(np.array(rows, dtype=bool), meta["ratio"], meta["mask_seed"],
                         tuple(meta["frozen_core"]))
    models = [nn.load_model(os.path.join(base, "models", f"model_{k:04d}.crvl")) for k in range(K)]
    with open(os.path.join(base, "correct.bin"), "rb") as fh:
        bits = np.unpackbits(np.frombuffer(fh.read(), dtype=np.uint8))[:K * m]
    from curvlink.privacy import PrivacyBudget
    budgets = [PrivacyBudget.from_dict(b) for b in meta.get("budgets", [])]
    return train.EnsembleRecord(models, masks, bits.reshape(K, m).astype(bool), meta["config_digest_train"],
                                budgets, meta.get("histories", []))


def _ensemble(run, cfg, S, args):
    if getattr(args, "ensemble", None):
        run.inputs.append(os.path.join(args.ensemble, "ensemble", "ensemble.json"))
        ens = load_ensemble(args.ensemble)
        if ens.correct.shape[1] != len(S):
            raise ConfigurationError("loaded ensemble does not match the configured dataset")
        return ens
    return pipeline.nonprivate_ensemble(cfg, S, run.workers)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run, cfg, args):
    S, hold, risk_se = _dataset(run, cfg)
    _save_data(run, S, hold)
    run.extra["bayes_risk"] = {"value": S.bayes_risk, "stderr": risk_se}


def cmd_train(run, cfg, args):
    S, hold, _ = _dataset(run, cfg)
    _save_data(run, S, hold)
    spec = C.model_spec(cfg)
    if args.dp_eps is not None:
        res = train.dp_train(spec, S, C.train_config(cfg, dp=True, eps=args.dp_eps))
        run.json("budget.json", res.budget.to_dict())
    else:
        res = train.train(spec, S, C.train_config(cfg))
    run.write_bytes("model.crvl", nn.to_bytes(res.model))
    run.write("model.json", json.dumps(nn.to_json(res.model), indent=1, sort_keys=True) + "\n")
    run.json("history.json", {"history": res.history})


def cmd_train_ensemble(run, cfg, args):
    S, hold, _ = _dataset(run, cfg)
    _save_data(run, S, hold)
    ens = pipeline.nonprivate_ensemble(cfg, S, run.workers)
    save_ensemble(run, ens)


def cmd_curvature(run, cfg, args):
    S, hold, _ = _dataset(run, cfg)
    ens = _ensemble(run, cfg, S, args)
    table = curvature.ensemble_curvature(ens, S, C.curv_params(cfg), args.which, run.workers)
    run.csv("curvature.csv", table.to_csv())


def cmd_memorization(run, cfg, args):
    S, hold, _ = _dataset(run, cfg)
    ens = _ensemble(run, cfg, S, args)
    mc = pipeline.mem_curv_analysis(cfg, ens, S, run.workers)
    run.csv("scores.csv", mc.table.to_csv())
    run.csv("curvature.csv", mc.curv.to_csv())
    run.write("fig4_memcurv.dat", fit.dat_text(pipeline.FIG4_COLS, pipeline.fig4_rows(mc),
                                               [f"config_digest: {run.digest}"]))
    run.json("fits.json", {"mem_vs_curv": {"scaled": mc.fits.scaled.to_dict(),
                                           "unscaled": mc.fits.unscaled.to_dict(),
                                           "correlation": mc.corr},
                           "topk": memorization.topk_memorized(mc.table, int(cfg["experiment"]["top_k"]))})


def cmd_mem_privacy(run, cfg, args):
    S, hold, _ = _dataset(run, cfg)
    ens = _ensemble(run, cfg, S, args)
    table = memorization.estimate_mem(ens, S)
    topk = memorization.topk_memorized(table, int(cfg["experiment"]["top_k"]))
    mp = pipeline.dp_mem_privacy(cfg, S, topk, run.workers)
    run.csv("mem_privacy.csv", mp.to_csv())
    run.write("fig8_memeps.dat", fit.dat_text(pipeline.FIG8_COLS,
                                              [[p.eps, p.mean_mem, p.stderr, p.bound] for p in mp.points],
                                              [f"config_digest: {run.digest}"]))
    reports = [theory.thm3_check(p.mean_mem, p.stderr, p.eps) for p in mp.points if p.eps in mp.ensembles]
    run.write("verification.json", theory.verification_json(None, reports, {
        "config_digest": run.digest, "topk": topk,
        "points": [vars(p) for p in mp.points]}))


def cmd_dp_sweep(run, cfg, args):
    """Budget-truncated DP models on the full training set: loss and curvature vs eps."""
    S, hold, risk_se = _dataset(run, cfg)
    e3 = pipeline.alpha_moment(cfg)
    sigma, caps, ensembles = pipeline.sweep_ensembles(cfg, S, run.workers)
    cells = [pipeline.sweep_cell(cfg, eps, ens, S, hold, risk_se, e3, None, run.workers)
             for eps, ens in ensembles.items()]
    run.csv("sweep.csv", "eps,steps,achieved_eps,mean_curv,curv_stderr,mean_loss,loss_stderr,loss_bound,thm2_rhs\n" +
            "".join(f"{c.eps!r},{c.steps},{c.achieved_eps!r},{c.mean_curv!r},{c.curv_se!r},{c.mean_loss!r},"
                    f"{c.mean_loss_se!r},{c.loss_bound!r},{theory.thm2_rhs(c.constants, c.eps)!r}\n"
                    for c in cells))
    note = [f"config_digest: {run.digest}"]
    fits = {}
    if len(cells) >= 4:
        sw = pipeline.sweep_fits(cells, [], len(S))
        eps = np.array([c.eps for c in cells])
        g = fit.curv_model_term(eps, len(S), sw.loss)
        run.write("fig6_losseps.dat", fit.dat_text(pipeline.FIG6_COLS, [
            [c.eps, c.steps, c.mean_loss, c.mean_loss_se, c.loss_bound, v]
            for c, v in zip(cells, fit.loss_curve(sw.loss, eps))], note))
        fixed = g + sw.curv_fixed.params["c2"]
        free = sw.curv_free.params["k"] * g + sw.curv_free.params["c2"]
        run.write("fig7_curveps.dat", fit.dat_text(pipeline.FIG7_COLS, [
            [c.eps, c.steps, c.mean_curv, c.curv_se, a, c.mean_curv - a, b, theory.thm2_rhs(c.constants, c.eps)]
            for c, a, b in zip(cells, fixed, free)], note))
        fits = {"loss_vs_eps": sw.loss.to_dict(), "curv_vs_eps": sw.curv_fixed.to_dict(),
                "curv_vs_eps_free_scale": sw.curv_free.to_dict(), "curv_vs_eps_correlation": sw.curv_corr}
    run.json("fits.json", fits)
    run.write("verification.json", theory.verification_json(
        None, [r for c in cells for r in c.reports],
        {"config_digest": run.digest, "sigma": sigma, "steps": {repr(k): v for k, v in caps.items()}}))


def cmd_verify(run, cfg, args):
    res = pipeline.verify(cfg, run.workers)
    run.files.extend(pipeline.write_verify(res, run.dir, run.digest))
    run.extra["verdicts"] = pipeline.verdicts(res)


def cmd_fit(run, cfg, args):
    """Refit the figure-analog data of an earlier run directory."""
    src = args.run
    if not src:
        raise ConfigurationError("fit needs --run DIR")
    out = {}
    f4 = os.path.join(src, "fig4_memcurv.dat")
    if os.path.isfile(f4):
        run.inputs.append(f4)
        cols, arr = fit.read_dat(f4)
        ix = {c: i for i, c in enumerate(cols)}
        bins = [fit.BinRow(int(r[ix["bin_index"]]), r[ix["mem_lo"]], r[ix["mem_hi"]],
                           None if np.isnan(r[ix["mean_mem"]]) else r[ix["mean_mem"]],
                           None if np.isnan(r[ix["max_curv"]]) else r[ix["max_curv"]], int(r[ix["count"]]))
                for r in arr]
        mf = fit.fit_mem_vs_curv(bins)
        out["mem_vs_curv"] = {"scaled": mf.scaled.to_dict(), "unscaled": mf.unscaled.to_dict()}
    f6 = os.path.join(src, "fig6_losseps.dat")
    f7 = os.path.join(src, "fig7_curveps.dat")
    if os.path.isfile(f6):
        run.inputs.append(f6)
        cols, arr = fit.read_dat(f6)
        lf = fit.fit_loss_vs_eps(arr[:, [cols.index("eps"), cols.index("loss_bound")]])
        out["loss_vs_eps"] = lf.to_dict()
        if os.path.isfile(f7):
            run.inputs.append(f7)
            cols7, arr7 = fit.read_dat(f7)
            pts = arr7[:, [cols7.index("eps"), cols7.index("mean_curv")]]
            m = args.m
            if m is None:
                m = C.genspec(cfg).n_samples
            out["curv_vs_eps_free"] = fit.fit_curv_vs_eps(pts, m, lf, "free").to_dict()
            out["curv_vs_eps_fixed"] = fit.fit_curv_vs_eps(pts, m, lf, "fixed").to_dict()
    if not out:
        raise ConfigurationError(f"no figure data files in {src}")
    run.json("fits.json", out)


def build_report(run_dirs):
    """Consolidated text + JSON summary of existing run directories."""
    entries, missing, versions = [], [], {}
    for d in run_dirs:
        mpath = os.path.join(d, "manifest.json")
        if not os.path.isfile(mpath):
            missing.append(d)
            continue
        with open(mpath) as fh:
            man = json.load(fh)
        versions.setdefault(man.get("library_version"), []).append(d)
        entry = {"run_dir": d, "command": man.get("command"), "status": man.get("status"),
                 "verdicts": man.get("verdicts"),
                 "figures": sorted(f for f in man.get("outputs", {}) if f.endswith(".dat"))}
        fpath = os.path.join(d, "fits.json")
        if os.path.isfile(fpath):
            with open(fpath) as fh:
                fits = json.load(fh)
            entry["fit_params"] = {k: v.get("params") if isinstance(v, dict) and "params" in v else
                                   {kk: vv.get("params") for kk, vv in v.items()
                                    if isinstance(vv, dict) and "params" in vv}
                                   for k, v in fits.items() if isinstance(v, dict)}
        entries.append(entry)
    warnings_ = []
    if len(versions) > 1:
        warnings_.append("runs were produced by different library versions: " +
                         "; ".join(f"{v}: {', '.join(ds)}" for v, ds in sorted(versions.items(), key=str)))
    doc = {"runs": entries, "missing_manifests": missing, "warnings": warnings_}
    lines = ["curvlink report", "==============="]
    if warnings_:
        lines += ["", "WARNINGS"] + [f"  {w}" for w in warnings_]
    if missing:
        lines += ["", "missing manifests:"] + [f"  {d}" for d in missing]
    for e in entries:
        lines += ["", f"run {e['run_dir']} ({e['command']}, {e['status']})"]
        v = e.get("verdicts") or {}
        if v:
            lines.append(f"  {'statement':<22}{'verdict':<10}details")
            rows = [("Theorem 1 (bins)", v.get("thm1")), ("Theorem 2", v.get("thm2")),
                    ("Theorem 3", v.get("thm3")), ("Lemma 1", v.get("lemma1")),
                    ("loss-difference", v.get("lossdiff")), ("curv-intermediate", v.get("curv_intermediate"))]
            for name, d in rows:
                if d is None:
                    continue
                if "satisfied" in d:
                    ok = "pass" if d["satisfied"] else "FAIL"
                else:
                    ok = "pass" if d.get("bins_satisfied") == d.get("bins") else "FAIL"
                det = ", ".join(f"{k}={_short(x)}" for k, x in d.items() if k != "satisfied")
                lines.append(f"  {name:<22}{ok:<10}{det}")
        for name, params in (e.get("fit_params") or {}).items():
            lines.append(f"  fit {name}: {json.dumps(params, sort_keys=True, default=str)}")
        for f in e["figures"]:
            lines.append(f"  figure data: {os.path.join(e['run_dir'], f)}")
    return "\n".join(lines) + "\n", doc


def _short(x):
    return f"{x:.4g}" if isinstance(x, float) else str(x)


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "train-ensemble": cmd_train_ensemble,
            "dp-sweep": cmd_dp_sweep, "curvature": cmd_curvature, "memorization": cmd_memorization,
            "mem-privacy": cmd_mem_privacy, "verify": cmd_verify, "fit": cmd_fit}


def make_parser():
    ap = argparse.ArgumentParser(prog="curvlink", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"curvlink {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("run_dirs", nargs="*")
            p.add_argument("--out", help="directory for report.txt / report.json (default: print only)")
            continue
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", default="desk", choices=sorted(C.PRESETS))
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--run-id", help="run directory name (overrides run_id)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("curvature", "memorization", "mem-privacy"):
            p.add_argument("--ensemble", help="run directory of a train-ensemble run to reuse")
        if name == "curvature":
            p.add_argument("--which", default="excluding_i", choices=curvature.WHICH)
        if name == "train":
            p.add_argument("--dp-eps", type=float, default=None, help="train with DP-SGD at this budget")
        if name == "fit":
            p.add_argument("--run", help="run directory holding figure data files")
            p.add_argument("--m", type=int, default=None, help="training set size for the curvature model")
    return ap


def _workers(args):
    if args.workers is not None:
        return args.workers
    env = os.environ.get("CURVLINK_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigurationError(f"CURVLINK_WORKERS={env!r} is not an integer") from exc
    return 1


def main(argv=None):
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "report":
        text, doc = build_report(args.run_dirs)
        sys.stdout.write(text)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "report.txt"), "w") as fh:
                fh.write(text)
            with open(os.path.join(args.out, "report.json"), "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return 0

    # validation: nothing is written if this fails
    try:
        file_cfg = C.load_json(args.config) if args.config else None
        flags = {}
        if args.seed is not None:
            flags["seed"] = args.seed
        if args.out is not None:
            flags["output_dir"] = args.out
        if args.run_id is not None:
            flags["run_id"] = args.run_id
        cfg = C.resolve(args.preset, file_cfg, flags)
        workers = _workers(args)
        if workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        run = Run(args.command, cfg, workers, [args.config] if args.config else [])
        run.open()
    except ConfigurationError as exc:
        print(f"curvlink: configuration error: {exc}", file=sys.stderr)
        return 1

    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        HANDLERS[args.command](run, cfg, args)
    except NumericError as exc:
        code, status, err = 2, "numeric_failure", f"{type(exc).__name__}: {exc}"
    except (ConfigurationError, CurvlinkError, ValueError) as exc:
        code, status, err = 1, "validation_error", f"{type(exc).__name__}: {exc}"
    except ArithmeticError as exc:
        code, status, err = 2, "numeric_failure", f"{type(exc).__name__}: {exc}"
    else:
        code, status, err = 0, "ok", None
    if err:
        log.debug(traceback.format_exc())
        print(f"curvlink: {err}", file=sys.stderr)
    run.manifest(status, code, started, round(time.perf_counter() - t0, 3), err)
    if code == 0:
        print(run.dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
