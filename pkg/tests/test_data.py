import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from curvlink import data, rng
from curvlink.errors import ConfigurationError, NotFoundError


def _spec(**kw):
    base = dict(n_classes=3, dim=4, head_per_class=30,
                tail_subpops=(data.TailSpec(0, 4, 5.0), data.TailSpec(1, 6, 5.0), data.TailSpec(2, 8, 5.0)),
                mislabel_fraction=0.2, cluster_std=1.0, seed=3, class_sep=5.0, tail_std_factor=1.0,
                n_duplicate_pairs=2)
    base.update(kw)
    return data.GenSpec(**base)


# ---------------------------------------------------------------- rng


def test_stream_is_reproducible_and_keyed():
    a = rng.stream(5, "x", 1).random(4)
    assert np.array_equal(a, rng.stream(5, "x", 1).random(4))
    assert not np.array_equal(a, rng.stream(5, "y", 1).random(4))
    assert not np.array_equal(a, rng.stream(5, "x", 2).random(4))
    assert not np.array_equal(a, rng.stream(6, "x", 1).random(4))


@given(st.integers(0, 2**63 - 1), st.text(min_size=1, max_size=8))
def test_derive_seed_is_a_u63(seed, purpose):
    s = rng.derive_seed(seed, purpose)
    assert 0 <= s < 2**63
    assert s == rng.derive_seed(seed, purpose)


# ---------------------------------------------------------------- generate


def test_generate_is_deterministic():
    assert data.to_csv(data.generate(_spec())) == data.to_csv(data.generate(_spec()))


def test_generate_size_and_planted_bookkeeping():
    spec = _spec()
    S = data.generate(spec)
    assert len(S) == spec.n_samples == 3 * 30 + 18 + 2
    assert len(S.mislabeled) == round(0.2 * 18)
    for i, j in S.duplicate_pairs:
        a, b = S.index_of(i), S.index_of(j)
        assert np.array_equal(S.X[a], S.X[b]) and S.y[a] == S.y[b]


def test_no_mislabels_means_labels_follow_clusters():
    spec = _spec(mislabel_fraction=0.0)
    S = data.generate(spec)
    cls_of = {k: k for k in range(3)}
    cls_of.update({3 + j: t.cls for j, t in enumerate(spec.tail_subpops)})
    assert all(S.y[i] == cls_of[int(S.subpop_ids[i])] for i in range(len(S)))
    assert S.mislabeled == ()


def test_mislabels_sit_in_the_tail_with_a_wrong_label():
    spec = _spec()
    S = data.generate(spec)
    for i in S.mislabeled:
        k = S.index_of(i)
        sub = int(S.subpop_ids[k])
        assert sub >= 3
        assert S.y[k] != spec.tail_subpops[sub - 3].cls


def test_degenerate_spec_rejected():
    with pytest.raises(ConfigurationError):
        data.GenSpec(n_classes=2, dim=2, head_per_class=0)


# ---------------------------------------------------------------- Bayes risk


def test_bayes_risk_well_separated_is_small():
    spec = data.GenSpec(n_classes=2, dim=2, head_per_class=50, cluster_std=0.01, class_sep=4.0)
    risk, _ = data.bayes_risk(spec, 20_000, 1)
    assert risk <= 0.01


def test_bayes_risk_identical_classes_is_half():
    spec = data.GenSpec(n_classes=2, dim=2, head_per_class=50, class_sep=0.0)
    risk, se = data.bayes_risk(spec, 20_000, 1)
    assert abs(risk - 0.5) <= 3 * se + 1e-12


def test_bayes_risk_far_separation_is_planted_noise_only():
    spec = _spec(class_sep=400.0, cluster_std=1.0, n_duplicate_pairs=0,
                 tail_subpops=(data.TailSpec(0, 10, 60.0), data.TailSpec(1, 20, 60.0)), mislabel_fraction=0.2)
    risk, se = data.bayes_risk(spec, 40_000, 2)
    assert abs(risk - 0.2 * spec.tail_mass) <= 3 * se + 1e-4


def test_bayes_risk_matches_grid_quadrature():
    """2-D spec: Monte-Carlo risk vs a dense-grid integral of min-error mass."""
    spec = data.GenSpec(n_classes=2, dim=2, head_per_class=100,
                        tail_subpops=(data.TailSpec(0, 20, 2.0), data.TailSpec(1, 30, 2.5)),
                        mislabel_fraction=0.1, cluster_std=1.0, seed=4, class_sep=2.0, tail_std_factor=0.7)
    w, means, stds, labels = data._components(spec)
    lo = means.min(axis=0) - 7 * stds.max()
    hi = means.max(axis=0) + 7 * stds.max()
    n = 700
    gx, gy = np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)
    XX, YY = np.meshgrid(gx, gy, indexing="ij")
    pts = np.stack([XX.ravel(), YY.ravel()], axis=1)
    joint = np.zeros((pts.shape[0], 2))
    for wc, mu, sd, lab in zip(w, means, stds, labels):
        dens = stats.multivariate_normal(mu, sd**2 * np.eye(2)).pdf(pts)
        joint += wc * dens[:, None] * lab[None, :]
    cell = (gx[1] - gx[0]) * (gy[1] - gy[0])
    quad = float((joint.sum(axis=1) - joint.max(axis=1)).sum() * cell)
    risk, se = data.bayes_risk(spec, 100_000, 5)
    assert abs(risk - quad) <= 2 * se


# ---------------------------------------------------------------- constructions


def test_leave_one_out():
    S = data.generate(_spec())
    ids = S.sample_ids
    S1 = data.leave_one_out(S, int(ids[3]))
    assert len(S1) == len(S) - 1
    assert data.dataset_distance(S, S1) == 1
    a = data.leave_one_out(S1, int(ids[7]))
    b = data.leave_one_out(data.leave_one_out(S, int(ids[7])), int(ids[3]))
    assert len(a) == len(S) - 2
    assert a.content_key() == b.content_key()
    with pytest.raises(NotFoundError):
        data.leave_one_out(S1, int(ids[3]))


def test_make_adjacent_ball():
    S = data.generate(_spec())
    T, alpha = data.make_adjacent(S, int(S.sample_ids[0]), 0.5, mode="ball_uniform", seed=2)
    assert len(T) == len(S) + 1
    assert np.linalg.norm(alpha) <= 0.5
    assert np.allclose(T.X[-1], S.X[0] + alpha)
    assert T.y[-1] == S.y[0]


@pytest.mark.parametrize("mode,kw", [("ball_uniform", {"upsilon": 1.0}), ("gaussian", {"sigma": 0.3})])
def test_alpha_has_zero_mean(mode, kw):
    a = data.draw_alpha(6, mode, seed=9, count=10_000, **kw)
    se = a.std(axis=0, ddof=1) / math.sqrt(len(a))
    assert np.all(np.abs(a.mean(axis=0)) <= 3 * se)


def test_gaussian_alpha_third_moment_matches_chi():
    d, sigma = 5, 0.4
    a = data.draw_alpha(d, "gaussian", sigma=sigma, seed=1, count=10_000)
    r3 = np.linalg.norm(a, axis=1) ** 3
    # closed form of E||a||^3 for a ~ N(0, sigma^2 I_d), derived here independently
    exact = sigma**3 * 2**1.5 * math.gamma((d + 3) / 2) / math.gamma(d / 2)
    assert abs(r3.mean() - exact) <= 2 * r3.std(ddof=1) / math.sqrt(len(r3))


# ---------------------------------------------------------------- masks


def test_masks_have_exact_ratio():
    ms = data.subsample_masks(100, 0.7, 20, 3)
    assert np.all(ms.masks.sum(axis=1) == 70)


def test_frozen_core_everything_is_all_true():
    ms = data.subsample_masks(30, 0.4, 5, 3, frozen_core=range(30))
    assert ms.masks.all()


def test_inclusion_frequency_is_ratio():
    ms = data.subsample_masks(50, 0.7, 10_000, 11)
    freq = ms.masks.mean(axis=0)
    se = math.sqrt(0.7 * 0.3 / 10_000)
    assert np.all(np.abs(freq - 0.7) <= 3 * se)


def test_masks_deterministic():
    a = data.subsample_masks(40, 0.5, 8, 2).masks
    assert np.array_equal(a, data.subsample_masks(40, 0.5, 8, 2).masks)


# ---------------------------------------------------------------- files


def test_csv_round_trip_skips_comment_lines(tmp_path):
    S = data.with_bayes_risk(data.generate(_spec()), 0.123)
    csv_path, json_path = tmp_path / "d.csv", tmp_path / "d.json"
    data.save_dataset(S, csv_path, json_path)
    text = csv_path.read_text()
    csv_path.write_text("# config_digest=abc\n" + text)
    T = data.load_dataset(csv_path, json_path)
    assert T.content_key() == S.content_key()
    assert T.bayes_risk == 0.123
    assert T.mislabeled == S.mislabeled and T.duplicate_pairs == S.duplicate_pairs
