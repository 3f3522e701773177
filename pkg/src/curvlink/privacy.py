"""Renyi-DP accounting for DP-SGD and closed-form privacy bounds.

The accountant tracks the RDP of the Poisson-subsampled Gaussian mechanism.
For integer orders the moment ``A_alpha = E_{mu0}[(mu1/mu0)^alpha]`` is the
exact binomial sum; fractional orders use the convexity of
``log A_alpha`` in ``alpha`` and interpolate between the neighbouring
integers (an upper bound, so still a valid guarantee).  Conversion to
(eps, delta) is the classic ``rdp + log(1/delta)/(alpha - 1)``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from curvlink.errors import CalibrationError, ConfigurationError

DEFAULT_ORDERS = tuple([1.5, 1.75] + [float(a) for a in range(2, 65)] + [128.0, 256.0])
ACCOUNTING_MODE = "sampled-gaussian-approx/rdp-classic-conversion"
SIGMA_BRACKET = (0.3, 1e3)


@dataclass
class PrivacyBudget:
    epsilon: float
    delta: float
    steps: int
    q: float
    sigma: float
    rdp: list = field(default_factory=list)
    accounting_mode: str = ACCOUNTING_MODE
    best_order: float = float("nan")
    stop_reason: str = ""

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "steps": self.steps,
            "q": self.q,
            "sigma": self.sigma,
            "best_order": self.best_order,
            "rdp": [[a, v] for a, v in self.rdp],
            "accounting_mode": self.accounting_mode,
            "stop_reason": self.stop_reason,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["rdp"] = [tuple(p) for p in d.get("rdp", [])]
        return cls(**d)


def _log_a_int(q, sigma, alpha):
    """log A_alpha for integer alpha >= 1 (binomial expansion)."""
    i = np.arange(alpha + 1, dtype=np.float64)
    log_comb = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    log_q = math.log(q)
    # (1-q)^(alpha-i) with the 0^0 = 1 convention at q = 1
    if q < 1.0:
        log_rest = (alpha - i) * math.log1p(-q)
    else:
        log_rest = np.where(i == alpha, 0.0, -np.inf)
    terms = log_comb + i * log_q + log_rest + (i * i - i) / (2.0 * sigma**2)
    return float(logsumexp(terms))


def _log_a(q, sigma, alpha):
    if alpha == int(alpha):
        return _log_a_int(q, sigma, int(alpha))
    lo = math.floor(alpha)
    hi = lo + 1
    t = alpha - lo
    log_lo = 0.0 if lo <= 1 else _log_a_int(q, sigma, lo)
    return (1.0 - t) * log_lo + t * _log_a_int(q, sigma, hi)


def rdp_subsampled_gaussian(q, sigma, steps, orders=DEFAULT_ORDERS):
    """RDP of ``steps`` compositions of the sampled Gaussian mechanism.

    Returns a list of ``(order, value)``.  Orders whose value overflows are
    dropped with a warning.
    """
    if not 0.0 < q <= 1.0:
        raise ConfigurationError(f"sampling rate q={q} outside (0, 1]")
    if not sigma > 0:
        raise ConfigurationError("sigma must be > 0")
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    out = []
    for a in orders:
        a = float(a)
        if not a > 1.0:
            raise ConfigurationError(f"RDP order {a} must be > 1")
        with np.errstate(over="ignore", invalid="ignore"):
            per_step = _log_a(q, sigma, a) / (a - 1.0)
        value = steps * per_step
        if not math.isfinite(value):
            warnings.warn(f"RDP order {a} overflowed and was dropped")
            continue
        out.append((a, max(value, 0.0)))
    return out


def rdp_to_eps(rdp, delta):
    """``(epsilon, best_order)`` minimising ``value + log(1/delta)/(order-1)``."""
    if not rdp:
        raise ConfigurationError("empty RDP list")
    if not 0.0 < delta < 1.0:
        raise ConfigurationError("delta must lie in (0, 1)")
    log_inv = math.log(1.0 / delta)
    best = min(rdp, key=lambda p: (p[1] + log_inv / (p[0] - 1.0), p[0]))
    return best[1] + log_inv / (best[0] - 1.0), best[0]


def epsilon_for(q, sigma, steps, delta, orders=DEFAULT_ORDERS):
    return rdp_to_eps(rdp_subsampled_gaussian(q, sigma, steps, orders), delta)[0]


def calibrate_noise(target_eps, delta, q, steps, orders=DEFAULT_ORDERS, bracket=SIGMA_BRACKET,
                    clamp_to_bracket=False, rtol=1e-3):
    """Smallest-noise sigma with ``eps(sigma)`` in ``[target*(1-rtol), target]``.

    Bisects on log sigma.  If even the smallest sigma in the bracket is
    private enough and ``clamp_to_bracket`` is set, that sigma is returned
    (the budget is then not exhausted); otherwise a CalibrationError names
    the bracket.
    """
    if not target_eps > 0:
        raise ConfigurationError("target_eps must be > 0")
    lo, hi = bracket

    def eps(s):
        return epsilon_for(q, s, steps, delta, orders)

    e_lo, e_hi = eps(lo), eps(hi)
    if e_hi > target_eps:
        raise CalibrationError(
            f"target eps {target_eps} unreachable: eps({hi})={e_hi:.4g}", bracket=(lo, hi))
    if e_lo <= target_eps:
        if e_lo >= target_eps * (1.0 - rtol) or clamp_to_bracket:
            return lo
        raise CalibrationError(
            f"target eps {target_eps} exceeds eps({lo})={e_lo:.4g}", bracket=(lo, hi))
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        e_mid = eps(mid)
        if not e_hi <= e_mid <= e_lo:
            raise CalibrationError("eps(sigma) is not monotone in the bracket", bracket=(lo, hi))
        if target_eps * (1.0 - rtol) <= e_mid <= target_eps:
            return mid
        if e_mid > target_eps:
            lo, e_lo = mid, e_mid
        else:
            hi, e_hi = mid, e_mid
    raise CalibrationError("bisection did not converge", bracket=(lo, hi))


def mem_upper_bound(eps):
    """Memorization bound for an eps-DP learner: ``1 - exp(-eps)``."""
    if eps < 0:
        raise ConfigurationError("eps must be >= 0")
    return -math.expm1(-eps)


def stability_bound(L, eps):
    """Error-stability constant implied by eps-DP with loss bounded by L."""
    if not L > 0 or eps < 0:
        raise ConfigurationError("need L > 0 and eps >= 0")
    return L * -math.expm1(-eps)


def prior_stability_bound(L, eps):
    """The older ``L (e^eps - 1)`` bound, kept for comparison reports."""
    if not L > 0 or eps < 0:
        raise ConfigurationError("need L > 0 and eps >= 0")
    return L * math.expm1(eps)


class RdpAccountant:
    """Per-step accountant for fixed ``(q, sigma)``; RDP is additive in steps."""

    def __init__(self, q, sigma, delta, orders=DEFAULT_ORDERS):
        self.q, self.sigma, self.delta = q, sigma, delta
        self._per_step = rdp_subsampled_gaussian(q, sigma, 1, orders)
        self.steps = 0

    def rdp(self, steps=None):
        s = self.steps if steps is None else steps
        return [(a, s * v) for a, v in self._per_step]

    def epsilon(self, steps=None):
        s = self.steps if steps is None else steps
        if s == 0:
            return 0.0
        return rdp_to_eps(self.rdp(s), self.delta)[0]

    def step(self):
        self.steps += 1

    def budget(self, stop_reason=""):
        rdp = self.rdp()
        eps, order = rdp_to_eps(rdp, self.delta) if self.steps else (0.0, float("nan"))
        return PrivacyBudget(eps, self.delta, self.steps, self.q, self.sigma, rdp,
                             ACCOUNTING_MODE, order, stop_reason)
