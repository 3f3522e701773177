import numpy as np
import pytest
from scipy import stats

from curvlink import curvature, data, nn, train
from curvlink.errors import ConfigurationError, InsufficientModelsError
from conftest import random_model


def test_identity_hessian_scores_dimension():
    d, h = 7, 1e-3
    X = np.random.default_rng(0).standard_normal((5, d))
    V = np.stack([curvature.probes(0, s, 10, d) for s in range(5)])
    # l(x) = 0.5 ||x||^2 has gradient x and H = I
    scores = curvature.fd_curvature(lambda P: P, X, V, h)
    assert np.allclose(scores, d, rtol=1e-9)
    raw = curvature.fd_curvature(lambda P: P, X, V, h, mode="raw")
    assert np.allclose(raw, d * h * h, rtol=1e-9)


def test_clamped_flat_region_scores_zero():
    spec = nn.ModelSpec((2, 2), "tanh", "clamped_cross_entropy", 1.0)
    m = nn.Model(spec, ((np.array([[0.0, 50.0], [0.0, 50.0]]), np.zeros(2)),))
    z = nn.Example(np.array([1.0, 1.0]), 0, 0)
    assert curvature.curvature_score(m, z, curvature.CurvParams()) == 0.0


def test_score_matches_exact_hessian_frobenius():
    """d=8, n=1000: normalized score vs tr(H^2) of the exact Hessian."""
    p = curvature.CurvParams(h=1e-4, n=1000, seed=1)
    worst = 0.0
    for seed in range(5):
        m = random_model((8, 12, 3), seed, scale=0.7)
        z = nn.Example(np.random.default_rng(50 + seed).standard_normal(8), seed % 3, seed)
        H = nn.exact_input_hessian(m, z)
        exact = float(np.sum(H * H))
        worst = max(worst, abs(curvature.curvature_score(m, z, p) - exact) / exact)
    assert worst <= 0.05


def test_error_decays_at_monte_carlo_rate():
    m = random_model((6, 10, 3), 3, scale=0.8)
    z0 = nn.Example(np.random.default_rng(1).standard_normal(6), 1, 0)
    H = nn.exact_input_hessian(m, z0)
    exact = float(np.sum(H * H))
    ns = [4, 16, 64, 256]
    rms = []
    for n in ns:
        errs = [curvature.curvature_score(m, nn.Example(z0.x, z0.y, sid), curvature.CurvParams(1e-4, n, 7)) - exact
                for sid in range(300)]
        rms.append(np.sqrt(np.mean(np.square(errs))))
    slope = np.polyfit(np.log(ns), np.log(rms), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_probes_are_order_independent_and_prefix_stable():
    a = curvature.probes(3, 17, 10, 5)
    b = curvature.probes(3, 17, 20, 5)
    assert set(np.unique(a)) <= {-1.0, 1.0}
    assert np.array_equal(a, b[:10])
    m = random_model((5, 6, 2), 0)
    g = np.random.default_rng(0)
    X, y = g.standard_normal((4, 5)), np.array([0, 1, 0, 1])
    p = curvature.CurvParams()
    full = curvature.curvature_scores(m, X, y, [10, 11, 12, 13], p)
    rev = curvature.curvature_scores(m, X[::-1], y[::-1], [13, 12, 11, 10], p)
    assert np.array_equal(full, rev[::-1])


def test_scores_are_nonnegative():
    for seed in range(10):
        m = random_model((4, 5, 3), seed, scale=3.0)
        X = np.random.default_rng(seed).standard_normal((20, 4)) * 3
        s = curvature.curvature_scores(m, X, np.arange(20) % 3, np.arange(20), curvature.CurvParams(mode="raw"))
        assert np.all(s >= 0)


def test_bad_params_rejected():
    with pytest.raises(ConfigurationError):
        curvature.CurvParams(h=2.0)
    with pytest.raises(ConfigurationError):
        curvature.CurvParams(n=0)
    with pytest.raises(ConfigurationError):
        curvature.CurvParams(mode="other")


def _trained(S, K=8, ratio=0.7, seed=4, frozen=None, epochs=8):
    spec = nn.ModelSpec((S.dim, 8, S.n_classes))
    masks = data.subsample_masks(len(S), ratio, K, seed, frozen_core=frozen)
    return train.train_ensemble(spec, S, masks, train.TrainConfig(epochs=epochs, batch_size=16, lr=0.1))


def _small():
    return data.generate(data.GenSpec(n_classes=3, dim=4, head_per_class=40,
                                      tail_subpops=(data.TailSpec(0, 5, 4.0), data.TailSpec(2, 5, 4.0)),
                                      mislabel_fraction=0.2, seed=8, n_duplicate_pairs=2))


def test_parameter_robustness_rank_correlation():
    S = _small()
    ens = _trained(S, K=2, epochs=15)
    m = ens.models[0]
    scores = {}
    for h in (1e-1, 1e-2, 1e-3):
        for n in (5, 10, 20):
            scores[h, n] = curvature.curvature_scores(m, S.X, S.y, S.sample_ids, curvature.CurvParams(h, n, 0))
    keys = list(scores)
    worst = min(stats.spearmanr(scores[a], scores[b])[0] for i, a in enumerate(keys) for b in keys[i + 1:])
    assert worst >= 0.95


def test_single_model_ensemble_has_nan_stderr():
    S = _small()
    ens = _trained(S, K=2).select([0])
    z = S.example(0)
    mean, se = curvature.expected_curvature(ens, z, curvature.CurvParams(), which="all", S=S)
    assert mean == curvature.curvature_score(ens.models[0], z, curvature.CurvParams())
    assert np.isnan(se)


def test_identical_models_have_zero_stderr():
    S = _small()
    ens = _trained(S, K=3)
    same = ens.select([0, 0, 0])
    mean, se = curvature.expected_curvature(same, S.example(5), curvature.CurvParams(), which="all", S=S)
    assert se == 0.0 and mean >= 0.0


def test_always_included_sample_has_no_excluding_models():
    S = _small()
    ens = _trained(S, K=3, frozen=range(len(S)))
    with pytest.raises(InsufficientModelsError) as err:
        curvature.expected_curvature(ens, S.example(0), curvature.CurvParams(), "excluding_i", S)
    assert err.value.counts == {"in": 3, "out": 0}


def test_expected_curvature_agrees_with_table():
    S = _small()
    ens = _trained(S, K=6)
    p = curvature.CurvParams(n=5)
    tab = curvature.ensemble_curvature(ens, S, p, "excluding_i", workers=2)
    for j in (0, 7, 30):
        z = S.example(j)
        if tab.count[j] >= 2:
            mean, se = curvature.expected_curvature(ens, z, p, "excluding_i", S)
            assert mean == pytest.approx(tab.mean[j], rel=1e-12)
            assert se == pytest.approx(tab.stderr[j], rel=1e-12)


def test_duplicate_pair_curvature_agrees():
    S = _small()
    ens = _trained(S, K=40, ratio=0.5)
    p = curvature.CurvParams()
    tab = curvature.ensemble_curvature(ens, S, p, "all")
    for i, j in S.duplicate_pairs:
        a, b = S.index_of(i), S.index_of(j)
        pooled = np.hypot(tab.stderr[a], tab.stderr[b])
        assert abs(tab.mean[a] - tab.mean[b]) <= 3 * pooled


# ---------------------------------------------------------------- eigen summaries


def test_psd_trace_equals_abs_sum():
    A = np.random.default_rng(0).standard_normal((5, 5))
    tr, ab = curvature.eigen_summary(A @ A.T)
    assert tr == pytest.approx(ab, abs=1e-6)


def test_indefinite_construction():
    tr, ab = curvature.eigen_summary(np.diag([1.0, -1.0]))
    assert tr == pytest.approx(0.0, abs=1e-15) and ab == pytest.approx(2.0)


def test_abs_sum_dominates_trace_on_random_models():
    for seed in range(10):
        m = random_model((5, 7, 3), seed)
        tr, ab = curvature.eigen_curvature(m, nn.Example(np.random.default_rng(seed).standard_normal(5), 1))
        assert ab >= abs(tr) - 1e-12


def test_cross_entropy_linear_model_hessian_is_psd():
    W = np.random.default_rng(1).standard_normal((4, 3))
    m = nn.Model(nn.ModelSpec((4, 3)), ((W, np.zeros(3)),))
    tr, ab = curvature.eigen_curvature(m, nn.Example(np.ones(4), 0))
    assert tr == pytest.approx(ab, abs=1e-6)
