import numpy as np
import pytest

from curvlink import data, memorization, nn, privacy, train
from curvlink.errors import ConfigurationError


def _table(correct, masks):
    return memorization.scores_from_matrices(correct, masks, np.arange(np.asarray(masks).shape[1]))


def test_always_correct_gives_zero():
    masks = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=bool)
    t = _table(np.ones_like(masks), masks)
    assert np.all(t.mem == 0.0)
    assert np.all(t.in_count + t.out_count == 4)


def test_correct_iff_included_gives_one():
    masks = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=bool)
    t = _table(masks.copy(), masks)
    assert np.all(t.mem == 1.0)


def test_all_in_row_is_flagged_not_filled():
    masks = np.array([[1, 0], [1, 1]], dtype=bool)
    t = _table(np.ones_like(masks), masks)
    assert np.isnan(t.mem[0]) and t.flags[0] == ["no_out_models"]
    assert not np.isnan(t.mem[1])


def _centroid_correctness(X, y, masks):
    """Nearest-centroid learner; class centroids from the included rows."""
    K, m = masks.shape
    out = np.zeros((K, m), dtype=bool)
    for k in range(K):
        cents = {}
        for c in np.unique(y):
            rows = masks[k] & (y == c)
            cents[c] = X[rows].mean(axis=0) if rows.any() else np.full(X.shape[1], np.inf)
        labels = sorted(cents)
        dist = np.stack([np.linalg.norm(X - cents[c], axis=1) for c in labels], axis=1)
        out[k] = np.array(labels)[np.argmin(dist, axis=1)] == y
    return out


def _brute(correct, masks):
    K, m = masks.shape
    mem = []
    for i in range(m):
        a = [correct[k, i] for k in range(K) if masks[k, i]]
        b = [correct[k, i] for k in range(K) if not masks[k, i]]
        mem.append(sum(a) / len(a) - sum(b) / len(b))
    return np.array(mem)


def test_toy_centroid_learner_matches_brute_force_and_is_stable():
    X = np.array([[0.0, 0.0], [0.2, 0.1], [1.6, 1.4], [3.0, 3.0], [3.1, 2.8], [1.4, 1.6]])
    y = np.array([0, 0, 0, 1, 1, 1])
    halves = []
    for seed in (1, 2):
        masks = data.subsample_masks(6, 0.5, 500, seed).masks
        correct = _centroid_correctness(X, y, masks)
        t = _table(correct, masks)
        assert np.max(np.abs(t.mem - _brute(correct, masks))) <= 1e-12
        halves.append(t)
    a, b = halves
    assert np.all(np.abs(a.mem - b.mem) <= 3 * np.hypot(a.mem_stderr, b.mem_stderr) + 1e-12)
    # the two border points are the memorized ones
    assert set(np.argsort(-a.mem)[:2]) == {2, 5}


def test_topk_orders_and_breaks_ties_by_id():
    masks = np.array([[1, 0, 1, 0], [0, 1, 0, 1], [1, 1, 0, 0], [0, 0, 1, 1]], dtype=bool)
    correct = np.array([[1, 1, 1, 0], [1, 1, 0, 1], [1, 1, 0, 0], [0, 1, 1, 1]], dtype=bool)
    t = memorization.scores_from_matrices(correct, masks, [40, 30, 20, 10])
    ids = memorization.topk_memorized(t, 4)
    mems = t.mem_of(ids)
    assert np.all(np.diff(mems) <= 0)
    for a, b in zip(ids, ids[1:]):
        if t.mem_of([a])[0] == t.mem_of([b])[0]:
            assert a < b
    with pytest.raises(ConfigurationError):
        memorization.topk_memorized(t, 5)


def test_tied_values_lower_id_first():
    t = memorization.ScoreTable(np.array([9, 3, 5]), np.array([0.5, 0.5, 0.1]), np.zeros(3),
                                np.ones(3, int), np.ones(3, int), np.ones(3), np.ones(3), [[], [], []])
    assert memorization.topk_memorized(t, 2) == [3, 9]


def _small(seed=8):
    tails = tuple(data.TailSpec(j % 3, s, 5.0) for j, s in enumerate([2, 3, 4, 5, 6, 8]))
    return data.generate(data.GenSpec(n_classes=3, dim=16, head_per_class=40, tail_subpops=tails,
                                      mislabel_fraction=0.2, seed=seed, class_sep=5.0))


def _ensemble(S, K, seed, cfg=None):
    spec = nn.ModelSpec((S.dim, 32, S.n_classes))
    masks = data.subsample_masks(len(S), 0.5, K, seed)
    cfg = cfg or train.TrainConfig(epochs=60, batch_size=16, lr=0.2, lr_drop_epochs=())
    return train.train_ensemble(spec, S, masks, cfg)


def test_mislabels_are_strongly_memorized():
    S = _small()
    t = memorization.estimate_mem(_ensemble(S, 40, 3), S)
    planted = t.mem_of(S.mislabeled)
    rest = np.setdiff1d(S.sample_ids, S.mislabeled)
    assert np.all(planted >= 0.5)
    assert planted.mean() - np.nanmean(t.mem_of(rest)) >= 0.5


def test_split_halves_agree():
    S = _small()
    ens = _ensemble(S, 60, 5)
    a = memorization.estimate_mem(ens.select(range(30)), S)
    b = memorization.estimate_mem(ens.select(range(30, 60)), S)
    ok = a.valid & b.valid
    pooled = np.hypot(a.mem_stderr, b.mem_stderr)
    agree = np.abs(a.mem - b.mem) <= 3 * pooled
    # rows with zero variance in both halves must match exactly
    assert np.mean(agree[ok]) >= 0.95
    assert np.all((a.mem[ok] >= -1) & (a.mem[ok] <= 1))


def test_leave_one_out_mode_on_a_tiny_set():
    # the class-1 point at 1.2 moves the boundary only when it is trained on
    X = np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [3.0, 0.0], [3.1, 0.0], [1.2, 0.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    S = data.Dataset(X, y, np.arange(6), y)
    t = memorization.estimate_mem_loo(nn.ModelSpec((2, 2)), S, train.TrainConfig(epochs=50, batch_size=6, lr=1.0,
                                                                                 lr_drop_epochs=()), 3)
    assert np.all(t.in_count == 3) and np.all(t.out_count == 3)
    assert t.mem[5] == pytest.approx(1.0)
    assert np.all(t.mem[[0, 1, 2, 3, 4]] == 0.0)
    with pytest.raises(ConfigurationError):
        memorization.estimate_mem_loo(nn.ModelSpec((2, 2)), _small(), train.TrainConfig(), 2)


# ---------------------------------------------------------------- privacy experiment


def _dp_cfg():
    # at eps=1e6 sigma sits on the bracket floor; a wide batch keeps that residual noise small
    return train.TrainConfig(epochs=100, batch_size=64, lr=1.0, lr_drop_epochs=(),
                             dp=train.DpConfig(clip_norm=5.0, target_epsilon=1.0, clamp_noise_to_bracket=True))


@pytest.mark.filterwarnings("ignore:.*duplicated masks")
def test_mem_privacy_curve_obeys_bound_and_grows():
    S = _small()
    topk = list(S.mislabeled)
    spec = nn.ModelSpec((S.dim, 32, S.n_classes))
    res = memorization.privacy_mem_experiment(S, topk, [0.25, 2.0, 1e6], 30, _dp_cfg(), spec, workers=1,
                                              mask_seed=4)
    pts = res.points
    assert [p.eps for p in pts] == [0.25, 2.0, 1e6]
    for p in pts:
        assert p.mean_mem <= privacy.mem_upper_bound(p.eps) + 3 * p.stderr
        assert p.n_models == 30 and p.n_valid == len(topk)
    assert pts[0].mean_mem < pts[-1].mean_mem
    # same masks and seeds at each eps, so the non-private limit uses the identical bookkeeping
    ens = res.ensembles[1e6]
    plain = train.train_ensemble(spec, S, ens.masks, train.TrainConfig(epochs=100, batch_size=64, lr=1.0,
                                                                       lr_drop_epochs=()))
    m_np, se_np, _ = memorization.topk_summary(memorization.estimate_mem(plain, S), topk)
    assert abs(pts[-1].mean_mem - m_np) <= 3 * np.hypot(pts[-1].stderr, se_np)


def test_mem_privacy_records_failed_cells():
    S = _small()
    cfg = train.TrainConfig(epochs=60, batch_size=len(S), lr=0.2, dp=train.DpConfig(target_epsilon=1.0))
    res = memorization.privacy_mem_experiment(S, list(S.mislabeled), [1e-4], 2, cfg,
                                              nn.ModelSpec((S.dim, S.n_classes)))
    assert np.isnan(res.points[0].mean_mem) and res.points[0].reason


def test_mem_privacy_rejects_bad_topk():
    S = _small()
    with pytest.raises(ConfigurationError):
        memorization.privacy_mem_experiment(S, [], [1.0], 2, _dp_cfg(), nn.ModelSpec((S.dim, 3)))
    with pytest.raises(ConfigurationError):
        memorization.privacy_mem_experiment(S, [0], [1.0], 1, _dp_cfg(), nn.ModelSpec((S.dim, 3)))


def test_score_csv_columns():
    masks = np.array([[1, 0], [0, 1]], dtype=bool)
    text = _table(masks.copy(), masks).to_csv()
    assert text.splitlines()[0] == "sample_id,mem,mem_stderr,in_count,out_count,curv_mean,curv_stderr,flags"
