import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iivm import metrics


def test_confusion_hand_tally():
    cm = metrics.confusion([1, 1, 2, 2], [1, 2, 2, 2])
    np.testing.assert_array_equal(cm, [[1, 1], [0, 2]])
    np.testing.assert_array_equal(metrics.confusion([1, 2, 3], [1, 2, 3]), np.eye(3))


def test_confusion_errors():
    with pytest.raises(ValueError):
        metrics.confusion([], [])
    with pytest.raises(ValueError):
        metrics.confusion([1, 2], [1])
    with pytest.raises(ValueError):
        metrics.confusion([1, 4], [1, 2], n_classes=3)


@pytest.mark.parametrize("cm, oa, aa, kappa", [
    (np.eye(3) * 5, 1.0, 1.0, 1.0),
    ([[1, 1], [1, 1]], 0.5, 0.5, 0.0),
    ([[3, 1], [1, 3]], 0.75, 0.75, 0.5),
])
def test_fixture_matrices(cm, oa, aa, kappa):
    assert metrics.oa_aa_kappa(np.array(cm)) == (oa, aa, kappa)


def test_degenerate_kappa_warns():
    with pytest.warns(RuntimeWarning):
        assert metrics.oa_aa_kappa(np.array([[4, 0], [0, 0]]))[2] == 0.0


def test_table_formatting():
    s, _ = metrics.summarize([1, 1, 2, 2], [1, 2, 2, 2])
    assert s.formatted() == ("75.0", "75.0", "0.50")


def test_rejection_curve_against_loop_oracle():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(3) * 0.7, size=200)
    truth = rng.integers(1, 4, size=200)
    curve = metrics.rejection_curve(P, truth)
    for t, rate, oa, kept in curve:
        idx = [i for i in range(200) if P[i].max() >= t]
        assert kept == len(idx)
        assert rate == pytest.approx(1 - len(idx) / 200)
        assert oa == pytest.approx(np.mean([np.argmax(P[i]) + 1 == truth[i] for i in idx]))
    assert curve[0][1] == 0.0
    assert curve[0][2] == pytest.approx(np.mean(np.argmax(P, axis=1) + 1 == truth))


def test_rejection_one_hot_correct_is_perfect():
    truth = np.array([1, 2, 3, 2])
    P = np.eye(3)[truth - 1]
    assert all(oa == 1.0 for _, _, oa, _ in metrics.rejection_curve(P, truth))


def test_rejection_omits_full_rejection_and_csv_keeps_grid(tmp_path):
    P = np.full((4, 2), 0.5)
    curve = metrics.rejection_curve(P, [1, 2, 1, 2], thresholds=(0.0, 0.5, 0.6))
    assert [t for t, *_ in curve] == [0.0, 0.5]
    path = tmp_path / "r.csv"
    metrics.write_rejection_csv(path, curve, (0.0, 0.5, 0.6))
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,rejection_rate,oa"
    assert len(lines) == 4 and lines[-1] == "0.6,1.0,nan"


def test_rejection_threshold_validation():
    with pytest.raises(ValueError):
        metrics.rejection_curve(np.ones((2, 2)) / 2, [1, 2], thresholds=(0.5, 0.2))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 5), st.integers(5, 60))
def test_metric_ranges_and_permutation_invariance(seed, K, n):
    rng = np.random.default_rng(seed)
    truth = rng.integers(1, K + 1, size=n)
    pred = np.where(rng.uniform(size=n) < 0.6, truth, rng.integers(1, K + 1, size=n))
    oa, aa, kappa = metrics.oa_aa_kappa(metrics.confusion(truth, pred, K))
    assert 0 <= oa <= 1 and 0 <= aa <= 1 and -1 <= kappa <= 1 + 1e-12
    perm = rng.permutation(K) + 1
    again = metrics.oa_aa_kappa(metrics.confusion(perm[truth - 1], perm[pred - 1], K))
    np.testing.assert_allclose(again, (oa, aa, kappa), atol=1e-12)
    cm = metrics.confusion(truth, pred, K)
    assert cm.sum() == n
    if np.all(truth == pred) and np.unique(truth).size > 1:
        assert kappa == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_retained_count_non_increasing(seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(4), size=50)
    curve = metrics.rejection_curve(P, rng.integers(1, 5, size=50))
    kept = [k for *_, k in curve]
    rates = [r for _, r, _, _ in curve]
    assert all(b <= a for a, b in zip(kept, kept[1:]))
    assert all(b >= a for a, b in zip(rates, rates[1:]))
