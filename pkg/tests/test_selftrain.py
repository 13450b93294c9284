import numpy as np
import pytest

from iivm import data, incremental as inc, selftrain
from iivm.errors import DataError
from iivm.incremental import IncrementalState
from iivm.kernel import KernelParams
from iivm.selftrain import AcquisitionConfig, CandidatePool


def scene_state(seed=0, size=32, spc=10):
    scene = data.synthesize(3, size, size, 5, samples_per_class=spc, seed=seed)
    ds = data.extract_training(scene.cube, scene.labels)
    cube = ds.transform(scene.cube.reshape(-1, 5)).reshape(size, size, 5)
    state = IncrementalState.train(ds.X, ds.y, KernelParams(0.1), 1e-2, pixel=ds.pixels,
                                   mean=ds.mean, std=ds.std)
    return scene, cube, state


def test_config_validation():
    with pytest.raises(ValueError):
        AcquisitionConfig(uncertainty_ceiling=0.1, probability_floor=0.2)
    with pytest.raises(ValueError):
        AcquisitionConfig(per_class_quota=0)


def test_acquire_filters():
    P = np.array([[0.45, 0.35, 0.20],   # disagreement, uncertain -> kept
                  [0.90, 0.05, 0.05],   # above ceiling
                  [0.34, 0.33, 0.33],   # agreement
                  [0.40, 0.30, 0.30]])  # disagreement but excluded
    cfg = AcquisitionConfig()
    pool = selftrain.acquire(P, [1, 1, 1, 1], [2, 2, 1, 3], cfg, exclude=[3])
    assert pool.pixel.tolist() == [0]
    assert pool.label.tolist() == [2]
    assert len(selftrain.acquire(P, [1, 1, 1, 1], [1, 1, 1, 1], cfg)) == 0
    # floor: max p below 0.1 cannot occur with 3 classes, so use 20 classes
    flat = np.full((1, 20), 0.05)
    assert len(selftrain.acquire(flat, [1], [2], cfg)) == 0


def test_pool_invariants_on_scene():
    scene, cube, state = scene_state(1)
    X = cube.reshape(-1, 5)
    P = state.model().predict_proba(X)
    a = np.argmax(P, axis=1) + 1
    from iivm import drf
    b = drf.smooth(P.reshape(32, 32, 3), 1.0).ravel()
    cfg = AcquisitionConfig()
    pool = selftrain.acquire(P, a, b, cfg)
    pm = pool.probs.max(axis=1)
    assert np.all((pm >= cfg.probability_floor) & (pm < cfg.uncertainty_ceiling))
    assert np.all(a[pool.pixel] != b[pool.pixel])
    assert np.array_equal(pool.label, b[pool.pixel])
    ranked = selftrain.leverage_rank(pool, X[pool.pixel], state)
    assert np.all(np.isfinite(ranked.leverage))
    assert np.all(np.diff(ranked.leverage) <= 1e-15)
    assert np.all((ranked.leverage >= -1e-10) & (ranked.leverage <= 1 + 1e-10))


def test_leverage_square_and_tall_cases():
    _, cube, state = scene_state(2)
    V = state.V
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=V)
    pool = CandidatePool(np.arange(V), np.ones(V, dtype=int), probs)
    ranked = selftrain.leverage_rank(pool, state.sel.X_V, state)
    np.testing.assert_allclose(ranked.leverage, 1.0, atol=1e-8)
    J = 3 * V
    X = rng.normal(size=(J, 5))
    pool = CandidatePool(np.arange(J), rng.integers(1, 4, size=J), rng.dirichlet(np.ones(3), size=J))
    ranked = selftrain.leverage_rank(pool, X, state)
    assert ranked.leverage.sum() == pytest.approx(V, abs=1e-6)


def _balance_inputs(seed=3):
    scene, cube, state = scene_state(seed)
    X = cube.reshape(-1, 5)
    P = state.model().predict_proba(X)
    a = np.argmax(P, axis=1) + 1
    return scene, X, state, P, a


def test_balance_disagreement_only_when_plentiful():
    scene, X, state, P, a = _balance_inputs()
    b = a % 3 + 1                     # everything disagrees
    P = np.full_like(P, 1 / 3)
    cfg = AcquisitionConfig(per_class_quota=5)
    pool = selftrain.acquire(P, a, b, cfg)
    batch = selftrain.balance(pool, P, a, b, X, state, cfg, np.random.default_rng(0))
    assert batch.counts(3).tolist() == [5, 5, 5]
    assert set(batch.provenance) == {selftrain.DISAGREEMENT}
    assert np.all(b[batch.pixel] == batch.y)


def test_balance_falls_back_to_oversampling():
    scene, X, state, P, a = _balance_inputs()
    b = a.copy()
    a_only = np.where(a == 3, 1, a)   # nobody agrees on class 3, nothing disagrees
    b = a_only.copy()
    cfg = AcquisitionConfig(per_class_quota=4)
    pool = selftrain.acquire(P, a_only, b, cfg)
    batch = selftrain.balance(pool, P, a_only, b, X, state, cfg, np.random.default_rng(0))
    assert batch.counts(3).tolist() == [4, 4, 4]
    mask = batch.y == 3
    assert all(p == selftrain.OVERSAMPLED for p, m in zip(batch.provenance, mask) if m)
    # duplicates stay close to existing class rows
    d = np.min(np.linalg.norm(batch.X[mask][:, None] - state.sel.X[state.y == 3][None], axis=2), axis=1)
    assert np.all(d < 0.2)


def test_balance_errors_without_rows_to_oversample():
    scene, X, state, P, a = _balance_inputs()
    empty = CandidatePool(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, 3)))
    state.y = state.y.copy()
    state.y[state.y == 2] = 1
    with pytest.raises(DataError):
        selftrain.balance(empty, P, np.ones_like(a), np.ones_like(a), X, state,
                          AcquisitionConfig(per_class_quota=2), np.random.default_rng(0))


def test_zero_iterations_returns_state_unchanged():
    scene, cube, state = scene_state(4)
    before = state.alpha.copy()
    out, report = selftrain.run(state, cube, AcquisitionConfig(max_iterations=0), truth=scene.truth)
    assert out is state and np.array_equal(out.alpha, before)
    assert len(report) == 1 and report[0].iteration == 0


def test_beta_zero_empties_pool_immediately():
    scene, cube, state = scene_state(5)
    out, report = selftrain.run(state, cube, AcquisitionConfig(beta=0.0, max_iterations=5))
    assert len(report) == 1 and out is state


def test_run_invariants_and_determinism(tmp_path):
    scene, cube, state = scene_state(6)
    cfg = AcquisitionConfig(max_iterations=3, per_class_quota=10, seed=1)
    rows = []
    s1, rep1 = selftrain.run(state.copy(), cube, cfg, truth=scene.truth, on_record=rows.append)
    s2, rep2 = selftrain.run(state.copy(), cube, cfg, truth=scene.truth)
    assert [r.row() for r in rep1] == [r.row() for r in rep2] == [r.row() for r in rows]
    np.testing.assert_array_equal(s1.alpha, s2.alpha)
    for r in rep1[1:]:
        assert r.added == 3 * 10
    assert s1.N == s1.n_initial + s1.n_acquired - s1.n_removed
    # the truth raster only feeds the report: without it the run is identical
    s3, rep3 = selftrain.run(state.copy(), cube, cfg)
    np.testing.assert_array_equal(s1.alpha, s3.alpha)
    np.testing.assert_array_equal(s1.y, s3.y)
    assert np.isnan(rep3[-1].oa)


def test_report_writer_flushes(tmp_path):
    path = tmp_path / "r.csv"
    w = selftrain.ReportWriter(path)
    w(selftrain.IterationRecord(0, 0, 0, 30, 5, 0.5))
    text = path.read_text().splitlines()   # readable before close
    assert text[0] == ",".join(selftrain.REPORT_COLUMNS) and len(text) == 2
    w.close()
