import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from curvlink import privacy
from curvlink.errors import CalibrationError, ConfigurationError


@pytest.mark.parametrize("sigma", [0.7, 1.0, 4.0, 20.0])
def test_full_batch_rdp_is_gaussian_divergence(sigma):
    orders = [float(a) for a in range(2, 65)]
    for a, v in privacy.rdp_subsampled_gaussian(1.0, sigma, 1, orders):
        assert v == pytest.approx(a / (2 * sigma**2), abs=1e-9)


def test_zero_steps_is_zero():
    assert all(v == 0.0 for _, v in privacy.rdp_subsampled_gaussian(0.1, 1.0, 0))


def _mixture_renyi(q, sigma, alpha):
    """D_alpha((1-q) N(0,s^2) + q N(1,s^2) || N(0,s^2)) by quadrature."""
    p0 = stats.norm(0, sigma).pdf

    def f(x):
        # mu / mu0 = (1 - q) + q exp((2x - 1) / (2 s^2))
        ratio = (1 - q) + q * math.exp((2 * x - 1) / (2 * sigma**2))
        return p0(x) * ratio**alpha

    val, _ = integrate.quad(f, -30 * sigma, 30 * sigma, epsabs=1e-13, epsrel=1e-12, limit=400)
    return math.log(val) / (alpha - 1)


@pytest.mark.parametrize("q,sigma,alpha", [(0.01, 2.0, 2.0), (0.1, 1.0, 3.0), (0.3, 1.5, 5.0)])
def test_subsampled_rdp_matches_quadrature(q, sigma, alpha):
    (a, v), = privacy.rdp_subsampled_gaussian(q, sigma, 1, [alpha])
    assert v == pytest.approx(_mixture_renyi(q, sigma, alpha), abs=1e-6)


def test_fractional_orders_upper_bound_quadrature():
    for alpha in (1.5, 2.5, 3.25):
        (a, v), = privacy.rdp_subsampled_gaussian(0.05, 1.2, 1, [alpha])
        assert v >= _mixture_renyi(0.05, 1.2, alpha) - 1e-9


def test_conversion_at_zero_rdp_picks_largest_order():
    rdp = [(2.0, 0.0), (8.0, 0.0), (32.0, 0.0)]
    eps, order = privacy.rdp_to_eps(rdp, 1e-5)
    assert order == 32.0
    assert eps == pytest.approx(math.log(1e5) / 31)


def test_conversion_single_order():
    eps, order = privacy.rdp_to_eps([(3.0, 0.4)], 1e-3)
    assert eps == 0.4 + math.log(1e3) / 2.0 and order == 3.0


def test_conversion_matches_grid_brute_force():
    # q=1, sigma=4, 100 steps: RDP at order a is 100 a / 32
    orders = [float(a) for a in range(2, 257)]
    eps, _ = privacy.rdp_to_eps(privacy.rdp_subsampled_gaussian(1.0, 4.0, 100, orders), 1e-5)
    brute = min(100 * a / 32 + math.log(1e5) / (a - 1) for a in orders)
    assert eps == pytest.approx(brute, abs=1e-4)
    # and the continuous optimum is only slightly lower
    cont = min(100 * a / 32 + math.log(1e5) / (a - 1) for a in np.linspace(1.01, 256, 200_000))
    assert cont <= eps <= cont + 0.05


@pytest.mark.parametrize("target", [1.0, 10.0, 50.0])
def test_calibration_round_trip(target):
    q, steps = 0.05, 400
    s = privacy.calibrate_noise(target, 1e-5, q, steps)
    e = privacy.epsilon_for(q, s, steps, 1e-5)
    assert 0.999 * target <= e <= target


def test_calibration_monotone_in_target():
    sig = [privacy.calibrate_noise(t, 1e-5, 0.05, 400) for t in (1.0, 10.0, 50.0)]
    assert sig[0] > sig[1] > sig[2]


def test_calibration_unreachable_reports_bracket():
    with pytest.raises(CalibrationError) as err:
        privacy.calibrate_noise(1e-4, 1e-5, 1.0, 1000)
    assert err.value.bracket == privacy.SIGMA_BRACKET


@given(st.floats(0.5, 10.0), st.integers(1, 200), st.floats(0.01, 1.0))
def test_epsilon_increases_with_steps(sigma, steps, q):
    assert privacy.epsilon_for(q, sigma, 2 * steps, 1e-5) > privacy.epsilon_for(q, sigma, steps, 1e-5)


def test_accountant_budget_matches_direct_computation():
    acc = privacy.RdpAccountant(0.1, 1.3, 1e-5)
    for _ in range(25):
        acc.step()
    b = acc.budget("epochs")
    assert b.epsilon == pytest.approx(privacy.epsilon_for(0.1, 1.3, 25, 1e-5))
    assert b.steps == 25 and "sampled-gaussian-approx" in b.accounting_mode
    assert privacy.PrivacyBudget.from_dict(b.to_dict()) == b


# ---------------------------------------------------------------- closed-form bounds


def test_mem_upper_bound_values():
    assert privacy.mem_upper_bound(0.0) == 0.0
    assert privacy.mem_upper_bound(math.log(2)) == pytest.approx(0.5, abs=1e-15)
    assert privacy.mem_upper_bound(50.0) == pytest.approx(1 - math.exp(-50), abs=1e-15)
    grid = np.linspace(0, 20, 200)
    vals = [privacy.mem_upper_bound(e) for e in grid]
    assert np.all(np.diff(vals) >= 0) and max(vals) <= 1.0


def test_stability_bound_values():
    assert privacy.stability_bound(1.0, 0.0) == 0.0
    assert privacy.stability_bound(1.0, 1.0) == pytest.approx(0.6321205588, abs=1e-10)
    for e in np.linspace(0.01, 30, 100):
        assert privacy.stability_bound(2.0, e) < privacy.prior_stability_bound(2.0, e)


def test_bounds_reject_bad_inputs():
    with pytest.raises(ConfigurationError):
        privacy.mem_upper_bound(-1.0)
    with pytest.raises(ConfigurationError):
        privacy.stability_bound(0.0, 1.0)
