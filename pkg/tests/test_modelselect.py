import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import gaussian_blobs
from iivm import data, drf, modelselect
from iivm.errors import ConfigError
from iivm.kernel import KernelParams
from iivm.modelselect import CvPlan


def test_kfold_equal_sizes():
    folds = modelselect.kfold_split(10, 5, seed=0)
    assert np.bincount(folds).tolist() == [2] * 5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(10, 80), st.integers(2, 6), st.integers(1, 4))
def test_kfold_partition_and_stratification(seed, n, k, C):
    labels = np.random.default_rng(seed).integers(1, C + 1, size=n)
    folds = modelselect.kfold_split(n, k, labels, seed)
    assert folds.shape == (n,) and folds.min() >= 0 and folds.max() < k
    for c in np.unique(labels):
        counts = np.bincount(folds[labels == c], minlength=k)
        assert counts.max() - counts.min() <= 1
    sizes = np.bincount(folds, minlength=k)
    assert sizes.max() - sizes.min() <= 1
    np.testing.assert_array_equal(folds, modelselect.kfold_split(n, k, labels, seed))


def test_plan_validation():
    with pytest.raises(ConfigError):
        CvPlan(k=1)
    with pytest.raises(ConfigError):
        CvPlan(gammas=())
    with pytest.raises(ConfigError):
        CvPlan(lambdas=(-1.0,))


def test_single_cell_grid():
    X, y = gaussian_blobs(10, 2, 2, seed=0)
    g, l, table = modelselect.grid_search(X, y, CvPlan(3, (0.5,), (1e-2,)))
    assert (g, l) == (0.5, 1e-2)
    assert len(table) == 3


def test_known_good_cell_beats_absurd_widths(tmp_path):
    X, y = gaussian_blobs(30, 3, 2, sep=3.0, seed=1)
    good = 0.5
    plan = CvPlan(5, (good / 1e3, good, good * 1e3), (1e-2,))
    g, l, table = modelselect.grid_search(X, y, plan, table_path=tmp_path / "cv.csv")
    assert g == good
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "gamma,lambda,fold,oa" and len(lines) == 1 + 3 * 5


def test_table_rows_per_cell_and_tie_rule():
    X = np.vstack([np.zeros((6, 1)), np.full((6, 1), 10.0)])
    y = np.repeat([1, 2], 6)
    plan = CvPlan(3, (0.5, 1.0), (1e-3, 1e-2))
    g, l, table = modelselect.grid_search(X, y, plan)
    assert len({(r[0], r[1]) for r in table}) == 4
    # perfectly separable: every cell scores 1.0, so the smoothest wins
    assert (g, l) == (1.0, 1e-2)


def test_all_folds_skipped_is_error():
    X, y = gaussian_blobs(4, 2, 1, seed=2)
    # a declared third class never appears, so every fold lacks it
    with pytest.warns(modelselect.FoldSkipped), pytest.raises(ConfigError):
        modelselect.grid_search(X, y, CvPlan(2, (0.5,), (1e-2,)), n_classes=3)


def test_spatial_folds_tiles():
    f = modelselect.spatial_folds(16, 16, 2, tile=8)
    assert f[0, 0] == 0 and f[0, 8] == 1 and f[8, 8] == 0
    assert set(np.unique(f)) == {0, 1}


def _noisy_scene():
    scene = data.synthesize(3, 32, 32, 4, separation=2.0, seed=3)
    ds = data.extract_training(scene.cube, scene.truth)
    feats = ds.transform(scene.cube.reshape(-1, 4)).reshape(32, 32, 4)
    sparse = np.zeros_like(scene.truth)
    pick = np.random.default_rng(0).uniform(size=sparse.shape) < 0.15
    sparse[pick] = scene.truth[pick]
    return feats, sparse


def test_beta_zero_grid_returns_zero():
    feats, labels = _noisy_scene()
    plan = CvPlan(2, betas=(0.0,), tile=8)
    beta, table = modelselect.select_beta(feats, labels, KernelParams(0.2), 1e-2, plan)
    assert beta == 0.0 and len(table) == 2


def test_smoothing_selected_on_noisy_blobs(tmp_path):
    feats, labels = _noisy_scene()
    plan = CvPlan(2, betas=(0.0, 0.5, 1.0), tile=8)
    beta, table = modelselect.select_beta(feats, labels, KernelParams(0.2), 1e-2, plan,
                                          table_path=tmp_path / "b.csv")
    assert beta > 0
    assert len(table) == 3 * 2
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "beta,fold,oa"
