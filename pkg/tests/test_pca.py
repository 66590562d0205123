import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countycast.errors import ConvergenceError, DataError
from countycast.pca import (
    components_for_variance,
    eigen_sym,
    fit_panel_pca,
    fit_pca,
    panel_matrix,
    rank_features,
    standardize,
)


def _fit_raw(X, names=None, retain=0.98, scale=True):
    s = standardize(X, scale=scale)
    return fit_pca(s.Z, names, retain, s)


# ---- standardize ------------------------------------------------------------------


def test_standardize_examples():
    X = np.array([[1.0, 0.0], [1.0, 2.0]])
    s = standardize(X)
    assert s.dropped == (0,)
    assert s.kept == (1,)
    # population std: column [0, 2] has mean 1, std 1
    assert s.Z[:, 0].tolist() == [-1.0, 1.0]


def test_standardize_idempotent():
    rng = np.random.default_rng(1)
    Z = standardize(rng.standard_normal((40, 3))).Z
    np.testing.assert_allclose(standardize(Z).Z, Z, atol=1e-10)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-10)


def test_standardize_needs_rows():
    with pytest.raises(DataError):
        standardize([[1.0, 2.0]])


# ---- eigen_sym --------------------------------------------------------------------


def test_eigen_diagonal():
    vals, V = eigen_sym(np.diag([1.0, 4.0]))
    assert vals.tolist() == [4.0, 1.0]
    np.testing.assert_array_equal(np.abs(V), [[0.0, 1.0], [1.0, 0.0]])


def test_eigen_two_by_two():
    vals, V = eigen_sym([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(vals, [3.0, 1.0], atol=1e-12)
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(np.abs(V[:, 0]), [r, r], atol=1e-12)
    assert abs(abs(V[0, 1]) - r) < 1e-12 and V[0, 1] * V[1, 1] < 0


def test_eigen_random_reconstruction_and_lapack():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((6, 6))
    S = A + A.T
    vals, V = eigen_sym(S)
    assert np.abs(V @ np.diag(vals) @ V.T - S).max() < 1e-8
    for lam, v in zip(vals, V.T):
        assert np.abs(S @ v - lam * v).max() < 1e-8
    # independent route: LAPACK
    np.testing.assert_allclose(vals, np.linalg.eigvalsh(S)[::-1], atol=1e-10)


def test_eigen_errors():
    with pytest.raises(DataError):
        eigen_sym([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(DataError):
        eigen_sym(np.ones((2, 3)))
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 5))
    with pytest.raises(ConvergenceError):
        eigen_sym(A + A.T, max_sweeps=1)


def test_eigen_sign_convention():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((5, 5))
    _, V = eigen_sym(A @ A.T)
    for v in V.T:
        assert v[np.argmax(np.abs(v))] > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31))
def test_eigen_orthonormal(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    vals, V = eigen_sym(A + A.T)
    assert np.abs(V.T @ V - np.eye(n)).max() < 1e-9
    assert np.all(np.diff(vals) <= 0)
    assert abs(vals.sum() - np.trace(A + A.T)) < 1e-8


# ---- fit_pca ----------------------------------------------------------------------


def test_rank_one_line():
    x = np.linspace(-2, 3, 25)
    model = _fit_raw(np.column_stack([x, x]))
    np.testing.assert_allclose(model.explained_variance_ratio, [1.0, 0.0], atol=1e-9)
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(model.components[0], [r, r], atol=1e-12)


def test_single_feature():
    rng = np.random.default_rng(2)
    model = _fit_raw(rng.standard_normal((10, 1)))
    assert model.informativeness.tolist() == [1.0]


def test_informativeness_matches_brute_force():
    rng = np.random.default_rng(50)
    X = rng.standard_normal((50, 6)) @ rng.standard_normal((6, 6))
    model = _fit_raw(X, retain=1.0)
    k = model.n_components
    brute = [
        sum(model.explained_variance_ratio[j] * abs(model.components[j][i]) for j in range(k))
        for i in range(6)
    ]
    np.testing.assert_allclose(model.informativeness, brute, rtol=0, atol=1e-12)


def test_model_invariants():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((80, 5)) @ rng.standard_normal((5, 5))
    X = np.column_stack([X, np.full(80, 3.0)])
    model = _fit_raw(X, names=[f"x{j}" for j in range(6)])
    C = model.components
    assert np.abs(C @ C.T - np.eye(5)).max() < 1e-9
    u = model.explained_variance_ratio
    assert abs(u.sum() - 1) < 1e-9 and np.all(u >= 0) and np.all(np.diff(u) <= 1e-15)
    cov = np.cov(standardize(X).Z, rowvar=False)
    assert abs(model.eigenvalues.sum() - np.trace(cov)) < 1e-8
    assert np.all(model.informativeness >= 0)
    assert model.informativeness[5] == 0.0
    assert rank_features(model)[-1] == ("x5", 0.0)


def test_known_diagonal_covariance():
    rng = np.random.default_rng(2000)
    sd = np.array([3.0, 2.0, 1.0])
    X = rng.standard_normal((2000, 3)) * sd
    model = _fit_raw(X, scale=False)
    expected = sd**2 / np.sum(sd**2)
    np.testing.assert_allclose(model.explained_variance_ratio, expected, atol=0.02)


# ---- components_for_variance and ranking ------------------------------------------


@pytest.mark.parametrize("ratios, frac, k", [([0.7, 0.2, 0.1], 0.7, 1), ([0.7, 0.2, 0.1], 0.98, 3), ([1.0], 0.3, 1)])
def test_components_for_variance(ratios, frac, k):
    got, cum = components_for_variance(ratios, frac)
    assert got == k
    np.testing.assert_allclose(cum, np.cumsum(ratios))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 1), min_size=1, max_size=8), st.floats(0.01, 1), st.floats(0.01, 1))
def test_components_for_variance_monotone(raw, a, b):
    ratios = sorted((np.array(raw) / sum(raw)).tolist(), reverse=True)
    lo, hi = sorted((a, b))
    assert components_for_variance(ratios, lo)[0] <= components_for_variance(ratios, hi)[0]


def test_rank_sort_semantics():
    model = _fit_raw(np.random.default_rng(0).standard_normal((20, 3)), names=["f1", "f2", "f3"])
    model = type(model)(**{**model.__dict__, "informativeness": np.array([0.2, 0.5, 0.1])})
    assert [f for f, _ in rank_features(model)] == ["f2", "f1", "f3"]
    assert rank_features(model, top_k=1) == [("f2", 0.5)]


def test_high_variance_feature_ranks_first():
    # unscaled PCA: the 10x-variance feature dominates the first component
    rng = np.random.default_rng(10)
    X = rng.standard_normal((500, 6))
    X[:, 3] *= math.sqrt(10)
    names = [f"f{j}" for j in range(6)]
    model = _fit_raw(X, names=names, scale=False)
    assert rank_features(model)[0][0] == "f3"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 3), st.floats(0.01, 100))
def test_ranking_scale_invariant(seed, col, c):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 4)) @ rng.standard_normal((4, 4))
    Y = X.copy()
    Y[:, col] *= c
    names = ["a", "b", "c", "d"]
    a = _fit_raw(X, names)
    b = _fit_raw(Y, names)
    np.testing.assert_allclose(a.informativeness, b.informativeness, atol=1e-9)


# ---- panel helpers ----------------------------------------------------------------


def test_panel_matrix_shapes(small_panel):
    X, names = panel_matrix(small_panel)
    assert X.shape == (small_panel.n_counties * small_panel.n_days, len(names))
    Xa, _ = panel_matrix(small_panel, aggregate=True)
    assert Xa.shape == (small_panel.n_counties, len(names))
    # row (county 2, day 5) carries that county's static values and that day's dynamic values
    row = X[2 * small_panel.n_days + 5]
    ns = len(small_panel.static_names)
    np.testing.assert_array_equal(row[:ns], small_panel.static[2])
    np.testing.assert_array_equal(row[ns:], small_panel.dynamic[2, 5])


def test_panel_pca_save(tmp_path, small_panel):
    model = fit_panel_pca(small_panel, retain=0.9)
    model.save(tmp_path)
    var = (tmp_path / "variance.csv").read_text().splitlines()
    assert var[0] == "component,eigenvalue,ratio,cumulative"
    info = (tmp_path / "informativeness.csv").read_text().splitlines()
    assert len(info) == 1 + len(model.feature_names)
    comps = (tmp_path / "components.csv").read_text().splitlines()
    assert len(comps) == 1 + len(model.kept)
    proj = model.transform(panel_matrix(small_panel)[0], n=2)
    assert proj.shape == (small_panel.n_counties * small_panel.n_days, 2)
