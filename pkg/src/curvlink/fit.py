"""Binning, constrained curve fits and correlation statistics.

Three empirical models are fitted:

* loss bound vs privacy budget   L(eps) = a + b exp(-c eps),  c >= 0
* memorization vs curvature      mem = p1 * sqrt(m_sub) * curv + c1,  p1, c1 >= 0
* curvature vs privacy budget    curv = k * L(eps) * (m + 1) * (1 - exp(-eps)) + c2

The nonlinear fit uses damped Gauss-Newton (Levenberg-Marquardt) from 16
deterministic starts; linear fits with sign constraints use an explicit
active-set enumeration, which is exact for two parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from curvlink.errors import ConfigurationError, FitError

N_STARTS = 16


@dataclass
class BinRow:
    bin_index: int
    mem_lo: float
    mem_hi: float
    mean_mem: Optional[float]
    max_curv: Optional[float]
    count: int
    mean_curv: Optional[float] = None


@dataclass
class FitResult:
    model_name: str
    params: dict
    residual_sse: float
    r_squared: float
    constraint_flags: list = field(default_factory=list)
    n_points: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _r_squared(y, sse):
    y = np.asarray(y, dtype=np.float64)
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return 1.0 if sse <= 1e-24 else 0.0
    return 1.0 - sse / sst


# ----------------------------------------------------------------------------
# binning


def bin_scores(table, n_bins=50, use_abs=True):
    """Equal-width bins of memorization over [0, 1].

    Every valid row lands in a bin: scores are taken in absolute value when
    ``use_abs`` (the bounded quantity is |mem|), otherwise negatives go to
    bin 0.  ``max_curv`` and ``mean_curv`` use rows whose curvature is known.
    """
    if n_bins < 2:
        raise ConfigurationError("n_bins must be >= 2")
    valid = np.flatnonzero(table.valid)
    if valid.size == 0:
        raise ConfigurationError("score table has no valid rows")
    mem = table.mem[valid]
    v = np.abs(mem) if use_abs else np.clip(mem, 0.0, 1.0)
    curv = (np.full(valid.size, np.nan) if table.curv_mean is None
            else np.asarray(table.curv_mean, dtype=np.float64)[valid])
    idx = np.minimum((v * n_bins).astype(np.int64), n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        mean_mem = max_curv = mean_curv = None
        if count:
            mean_mem = float(v[sel].mean())
            c = curv[sel]
            c = c[np.isfinite(c)]
            if c.size:
                max_curv = float(c.max())
                mean_curv = float(c.mean())
        rows.append(BinRow(b, b / n_bins, (b + 1) / n_bins, mean_mem, max_curv, count, mean_curv))
    return rows


# ----------------------------------------------------------------------------
# loss bound vs eps


def _exp_model(p, x):
    a, b, c = p
    return a + b * np.exp(-c * x)


def _exp_jac(p, x):
    a, b, c = p
    e = np.exp(-c * x)
    return np.column_stack([np.ones_like(x), e, -b * x * e])


def _lm(x, y, p0, max_iter=500, tol=1e-15):
    """Projected Levenberg-Marquardt for the exponential model (c >= 0)."""
    p = np.array(p0, dtype=np.float64)
    p[2] = max(p[2], 0.0)
    r = y - _exp_model(p, x)
    sse = float(r @ r)
    lam = 1e-3
    for it in range(max_iter):
        J = _exp_jac(p, x)
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(30):
            step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
            cand = p + step
            cand[2] = max(cand[2], 0.0)
            rc = y - _exp_model(cand, x)
            sc = float(rc @ rc)
            if np.isfinite(sc) and sc <= sse:
                improved = True
                break
            lam *= 10.0
        if not improved:
            return p, sse, it, True
        delta = np.max(np.abs(cand - p) / (np.abs(p) + 1e-12))
        gain = sse - sc
        p, r, sse = cand, rc, sc
        lam = max(lam / 10.0, 1e-12)
        if delta < 1e-13 or gain <= tol * max(sse, 1e-300) or sse < 1e-30:
            return p, sse, it + 1, True
    return p, sse, max_iter, False


def _linear_ab(x, y, c):
    A = np.column_stack([np.ones_like(x), np.exp(-c * x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def fit_loss_vs_eps(points):
    """Fit ``L(eps) = a + b exp(-c eps)`` with ``c >= 0``.

    Starts: 16 values of ``c`` log-spaced over [1e-3, 10] relative to the
    eps range, each with the least-squares ``(a, b)`` for that ``c``.  The
    lowest SSE wins; ties go to the earliest start.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 4:
        raise ConfigurationError("need at least 4 (eps, loss) points")
    x, y = pts[:, 0], pts[:, 1]
    if len(np.unique(x)) != len(x):
        raise ConfigurationError("eps values must be distinct")
    span = max(float(x.max() - x.min()), 1e-12)
    best, diag = None, []
    for s, c0 in enumerate(np.logspace(-3, 1, N_STARTS) / span):
        a0, b0 = _linear_ab(x, y, c0)
        p, sse, iters, ok = _lm(x, y, (a0, b0, c0))
        diag.append({"start": s, "c0": float(c0), "sse": sse, "iters": iters, "converged": ok})
        if ok and np.all(np.isfinite(p)) and (best is None or sse < best[1]):
            best = (p, sse, s)
    if best is None:
        raise FitError("loss-vs-eps fit failed from every start", {"starts": diag})
    p, sse, s = best
    a, b, c = (float(v) for v in p)
    flags = ["c_at_bound"] if c == 0.0 else []
    if b >= 0 and c >= 0:
        grid = np.linspace(x.min(), x.max(), 64)
        assert np.all(np.diff(_exp_model(p, grid)) <= 1e-12 * (1 + abs(a) + abs(b))), \
            "fitted loss curve not monotone"
    return FitResult("loss_vs_eps", {"a": a, "b": b, "c": c}, float(sse), _r_squared(y, sse), flags,
                     len(x), {"best_start": s, "starts": diag})


def loss_curve(fit, eps):
    p = fit.params
    return p["a"] + p["b"] * np.exp(-p["c"] * np.asarray(eps, dtype=np.float64))


# ----------------------------------------------------------------------------
# constrained linear fits


def nonneg_line(x, y):
    """Least squares ``y = p x + c`` subject to ``p, c >= 0``.

    Enumerates the four active sets (free, p = 0, c = 0, both 0) and keeps
    the feasible one with the smallest SSE.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cands = []
    A = np.column_stack([x, np.ones_like(x)])
    (p, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    cands.append((p, c, []))
    cands.append((0.0, max(float(y.mean()), 0.0), ["p1_at_bound"]))
    xx = float(x @ x)
    cands.append((max(float(x @ y) / xx, 0.0) if xx > 0 else 0.0, 0.0, ["c1_at_bound"]))
    cands.append((0.0, 0.0, ["p1_at_bound", "c1_at_bound"]))
    best = None
    for p, c, fl in cands:
        if p < 0 or c < 0:
            continue
        r = y - (p * x + c)
        sse = float(r @ r)
        if best is None or sse < best[2] - 1e-15 * max(1.0, sse):
            best = (float(p), float(c), sse, fl)
    return best


@dataclass
class MemCurvFit:
    scaled: FitResult
    unscaled: FitResult
    x_scaled: np.ndarray
    x_unscaled: np.ndarray
    y: np.ndarray


def fit_mem_vs_curv(binned, m_sub=None):
    """``mean_mem ~ p1 * sqrt(m_sub) * max_curv + c1`` with ``p1, c1 >= 0``.

    ``m_sub`` defaults to the bin populations.  The same constrained fit on
    the unscaled ``max_curv`` is returned alongside for comparison.
    """
    rows = [b for b in binned if b.count > 0 and b.max_curv is not None]
    if not any(b.count > 0 for b in binned):
        raise ConfigurationError("all bins are empty")
    if len(rows) < 3:
        raise ConfigurationError("need at least 3 nonempty bins with curvature")
    if m_sub is None:
        msub = np.array([b.count for b in rows], dtype=np.float64)
    else:
        lookup = dict(zip([b.bin_index for b in binned], m_sub)) if len(m_sub) == len(binned) \
            else dict(zip([b.bin_index for b in rows], m_sub))
        msub = np.array([lookup[b.bin_index] for b in rows], dtype=np.float64)
    curv = np.array([b.max_curv for b in rows])
    y = np.array([b.mean_mem for b in rows])
    xs = np.sqrt(msub) * curv
    out = []
    for name, x in (("mem_vs_sqrt_msub_curv", xs), ("mem_vs_curv", curv)):
        p, c, sse, flags = nonneg_line(x, y)
        out.append(FitResult(name, {"p1": p, "c1": c}, sse, _r_squared(y, sse), flags, len(y)))
    return MemCurvFit(out[0], out[1], xs, curv, y)


def curv_model_term(eps, m, loss_fit):
    eps = np.asarray(eps, dtype=np.float64)
    return loss_curve(loss_fit, eps) * (m + 1) * -np.expm1(-eps)


def fit_curv_vs_eps(points, m, loss_fit, scale="fixed"):
    """Fit ``curv = k * L(eps) (m+1) (1 - e^-eps) + c2`` with ``L`` frozen.

    ``scale="fixed"`` keeps ``k = 1`` and fits only ``c2``; ``scale="free"``
    also fits the proportionality factor ``k`` (the computed curvature score
    is only proportional to the quantity in the bound).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ConfigurationError("no points")
    eps, y = pts[:, 0], pts[:, 1]
    g = curv_model_term(eps, m, loss_fit)
    flags = []
    if scale == "fixed":
        k = 1.0
        c2 = float(np.mean(y - g))
    elif scale == "free":
        if np.ptp(g) == 0.0:
            k, c2 = 0.0, float(y.mean())
            flags.append("scale_unidentified")
        else:
            A = np.column_stack([g, np.ones_like(g)])
            (k, c2), *_ = np.linalg.lstsq(A, y, rcond=None)
            k, c2 = float(k), float(c2)
    else:
        raise ConfigurationError("scale must be 'fixed' or 'free'")
    r = y - (k * g + c2)
    sse = float(r @ r)
    return FitResult("curv_vs_eps_" + scale, {"k": k, "c2": c2, **loss_fit.params, "m": int(m)},
                     sse, _r_squared(y, sse), flags, len(y),
                     {"residuals": r.tolist(), "eps": eps.tolist()})


# ----------------------------------------------------------------------------
# correlation and plot files


def correlation(xs, ys):
    """Pearson and Spearman coefficients; ``undefined`` when a side is constant."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ConfigurationError("xs and ys must be 1-D and equally long")
    if len(xs) < 3:
        raise ConfigurationError("need at least 3 points")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return {"pearson": float("nan"), "spearman": float("nan"), "undefined": True}
    return {"pearson": float(stats.pearsonr(xs, ys)[0]),
            "spearman": float(stats.spearmanr(xs, ys)[0]), "undefined": False}


def _cell(v):
    if v is None:
        return "nan"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def dat_text(columns, rows, comments=()):
    lines = [f"# {c}" for c in comments]
    lines.append("# columns: " + " ".join(columns))
    lines += [" ".join(_cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_dat(path, columns, rows, comments=()):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dat_text(columns, rows, comments))


def read_dat(path):
    cols, rows = None, []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("# columns:"):
                cols = line.split(":", 1)[1].split()
            elif line.strip() and not line.startswith("#"):
                rows.append([float(v) for v in line.split()])
    return cols, np.array(rows)
