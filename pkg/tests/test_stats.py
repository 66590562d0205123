import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from countycast.dataset import SynthSpec, generate_synthetic_panel
from countycast.errors import DataError, DegenerateInputError
from countycast.stats import (
    METHODS,
    average_ranks,
    betainc_reg,
    correlate,
    correlate_panel,
    histogram_intersection,
    kendall,
    mutual_information,
    pearson,
    spearman,
    spearman_shortcut,
    t_two_sided_p,
)

# ---- independent oracles ----------------------------------------------------------


def pearson_oracle(x, y):
    m = len(x)
    mx = sum(x) / m
    my = sum(y) / m
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = math.sqrt(sum((a - mx) ** 2 for a in x)) * math.sqrt(sum((b - my) ** 2 for b in y))
    return num / den


def t_pdf(t, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + t * t / df) ** (-(df + 1) / 2)


def t_p_quadrature(t, df):
    # two-sided tail as 1 - integral over [-|t|, |t|]
    inner, _ = integrate.quad(t_pdf, 0.0, abs(t), args=(df,), epsabs=1e-13, epsrel=1e-13, limit=200)
    return 1.0 - 2.0 * inner


def kendall_oracle(x, y):
    m = len(x)
    conc = disc = 0
    for i in range(m):
        for j in range(i + 1, m):
            s = (x[i] - x[j]) * (y[i] - y[j])
            if s > 0:
                conc += 1
            elif s < 0:
                disc += 1
    return (conc - disc) / (m * (m - 1) / 2)


def hist_oracle(x, y, bins):
    lo = min(min(x), min(y))
    hi = max(max(x), max(y))
    width = (hi - lo) / bins

    def counts(v):
        c = [0] * bins
        for a in v:
            k = int((a - lo) / width)
            c[min(k, bins - 1)] += 1
        return [n / len(v) for n in c]

    return sum(min(a, b) for a, b in zip(counts(x), counts(y)))


# ---- pearson ----------------------------------------------------------------------


def test_pearson_exact_lines():
    assert pearson([1, 2, 3], [2, 4, 6]).statistic == 1.0
    assert pearson([1, 2, 3], [6, 4, 2]).statistic == -1.0


def test_pearson_matches_oracle_and_quadrature():
    rng = np.random.default_rng(11)
    x = rng.uniform(size=20)
    y = 0.3 * x + rng.uniform(size=20)
    res = pearson(x, y)
    assert abs(res.statistic - pearson_oracle(list(x), list(y))) <= 1e-12
    r = res.statistic
    t = r * math.sqrt(18 / (1 - r * r))
    assert abs(res.p_value - t_p_quadrature(t, 18)) <= 1e-6
    assert res.n == 20 and res.method == "pearson"


@pytest.mark.parametrize("t, df", [(0.0, 5), (1.0, 1), (2.5, 7), (-3.1, 30), (0.4, 2.5)])
def test_t_tail_against_quadrature(t, df):
    assert abs(t_two_sided_p(t, df) - t_p_quadrature(t, df)) <= 1e-9


@pytest.mark.parametrize("a, b, x, expected", [(1, 1, 0.3, 0.3), (2, 1, 0.5, 0.25), (1, 2, 0.5, 0.75)])
def test_betainc_closed_forms(a, b, x, expected):
    assert abs(betainc_reg(a, b, x) - expected) <= 1e-12


def test_pearson_errors():
    with pytest.raises(DegenerateInputError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DataError):
        pearson([1, 2, 3], [1, 2])
    with pytest.raises(DataError):
        pearson([1, 2], [1, 2])


def test_pearson_p_monotone_in_r():
    m = 15
    ps = [t_two_sided_p(r * math.sqrt((m - 2) / (1 - r * r)), m - 2) for r in np.linspace(0, 0.99, 60)]
    assert all(b < a for a, b in zip(ps, ps[1:]))


# ---- rank measures ----------------------------------------------------------------


def test_spearman_examples():
    x = [1, 2, 3, 4, 5]
    assert spearman(x, [v**3 for v in x]).statistic == pytest.approx(1.0, abs=1e-15)
    assert spearman([1, 2, 3], [9, 4, 1]).statistic == pytest.approx(-1.0, abs=1e-15)
    assert spearman(x, x).p_value is None


def test_spearman_shortcut_agrees_without_ties():
    rng = np.random.default_rng(5)
    x, y = rng.permutation(15).astype(float), rng.standard_normal(15)
    assert abs(spearman(x, y).statistic - spearman_shortcut(x, y)) <= 1e-12


def test_average_ranks_ties():
    assert average_ranks([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]


def test_kendall_examples():
    assert kendall([1, 2, 3], [1, 2, 3]).statistic == 1.0
    assert kendall([1, 2, 3], [3, 2, 1]).statistic == -1.0


def test_kendall_matches_enumeration():
    rng = np.random.default_rng(12)
    x, y = rng.standard_normal(12), rng.standard_normal(12)
    assert kendall(x, y).statistic == kendall_oracle(list(x), list(y))


def test_kendall_tied_pairs_count_for_neither():
    # pairs: (0,1) tie in x, (0,2) concordant, (1,2) concordant -> 2/3
    assert kendall([1, 1, 2], [1, 2, 3]).statistic == pytest.approx(2 / 3, abs=1e-15)


# ---- histogram intersection and mutual information ---------------------------------


def test_hist_identical_and_disjoint():
    x = [0.1, 0.5, 0.9, 0.3]
    assert histogram_intersection(x, x, bins=5).statistic == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, 50)
    assert histogram_intersection(a, a + 10, bins=8).statistic == 0.0
    assert histogram_intersection([3, 3], [3, 3], bins=4).statistic == 1.0


def test_hist_matches_naive_binning():
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal(200), rng.standard_normal(200) + 0.5
    got = histogram_intersection(x, y, bins=8).statistic
    assert abs(got - hist_oracle(list(x), list(y), 8)) <= 1e-12


def test_hist_bins_check():
    with pytest.raises(DataError):
        histogram_intersection([1, 2], [1, 2], bins=1)


def test_mi_independent_is_small():
    rng = np.random.default_rng(21)
    x, y = rng.uniform(size=10000), rng.uniform(size=10000)
    assert mutual_information(x, y).statistic < 0.05


def test_mi_self_equals_binned_entropy():
    rng = np.random.default_rng(22)
    x = rng.uniform(size=10000)
    p = np.bincount(np.minimum((x - x.min()) / (x.max() - x.min()) * 4, 3).astype(int), minlength=4) / x.size
    entropy = -float(np.sum(p * np.log(p)))
    assert abs(mutual_information(x, x, bins=4).statistic - entropy) <= 1e-2


def test_mi_constant_input():
    assert mutual_information([2.0] * 30, np.arange(30.0)).statistic == 0.0


# ---- properties -------------------------------------------------------------------

vectors = st.integers(3, 40).flatmap(
    lambda m: st.tuples(
        st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=m, max_size=m),
        st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=m, max_size=m),
    )
).filter(lambda p: np.ptp(p[0]) > 1e-3 and np.ptp(p[1]) > 1e-3)


@settings(max_examples=100, deadline=None)
@given(vectors)
def test_symmetry(pair):
    x, y = pair
    a, b = correlate(x, y), correlate(y, x)
    for method in METHODS:
        assert abs(a[method].statistic - b[method].statistic) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(0.1, 10), st.floats(-100, 100), st.booleans())
def test_pearson_affine(pair, scale, shift, flip):
    x, y = map(np.asarray, pair)
    a = -scale if flip else scale
    r = pearson(x, y).statistic
    assert abs(pearson(a * x + shift, y).statistic - math.copysign(1, a) * r) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(
    st.integers(3, 40).flatmap(
        lambda m: st.tuples(st.lists(st.integers(-500, 500), min_size=m, max_size=m),
                            st.lists(st.integers(-500, 500), min_size=m, max_size=m))
    ).filter(lambda p: len(set(p[0])) > 1 and len(set(p[1])) > 1)
)
def test_rank_measures_monotone_invariant(pair):
    # integer grid / 100 keeps exp() strictly increasing in floating point
    x, y = (np.asarray(v) / 100.0 for v in pair)
    ex = np.exp(x)
    assert spearman(ex, y).statistic == pytest.approx(spearman(x, y).statistic, abs=1e-12)
    assert kendall(ex, y).statistic == kendall(x, y).statistic


@settings(max_examples=100, deadline=None)
@given(vectors)
def test_ranges(pair):
    res = correlate(*pair)
    for method in ("pearson", "spearman", "kendall"):
        assert -1.0 <= res[method].statistic <= 1.0
    assert 0.0 <= res["hist_intersection"].statistic <= 1.0
    assert res["mutual_information"].statistic >= 0.0
    assert 0.0 <= res["pearson"].p_value <= 1.0
    assert all(res[m].p_value is None for m in METHODS if m != "pearson")


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**31))
def test_kendall_enumeration_property(m, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 6, m).astype(float)
    y = rng.integers(0, 6, m).astype(float)
    assert kendall(x, y).statistic == kendall_oracle(list(x), list(y))


# ---- panel report -----------------------------------------------------------------


def test_coupled_feature_stands_out():
    panel = generate_synthetic_panel(SynthSpec(n_counties=30, n_days=120, beta=0.9), seed=7)
    rep = correlate_panel(panel, outcomes=("cumulative_cases",))
    r = {f: abs(rep.get(f, "cumulative_cases").statistic) for f in panel.static_names}
    coupled = panel.static_names[0]
    decoys = [v for f, v in r.items() if f != coupled]
    assert r[coupled] > np.median(decoys)


def test_null_panel_p_values():
    # enough features for a 95% share to be meaningful
    panel = generate_synthetic_panel(SynthSpec(n_counties=200, n_days=60, n_static=40, beta=0.0), seed=4)
    rep = correlate_panel(panel, outcomes=("cumulative_cases",))
    ps = [rep.get(f, "cumulative_cases").p_value for f in panel.static_names]
    assert np.mean(np.array(ps) > 0.01) >= 0.95


def test_report_rows_and_csv(tmp_path, small_panel):
    rep = correlate_panel(small_panel, outcomes=("daily_deaths", "cumulative_deaths"))
    keys = [(r.feature, r.outcome) for r in rep.rows]
    assert keys == sorted(keys)
    assert len(keys) == len(small_panel.static_names) * 2
    path = rep.to_csv(tmp_path / "c.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "feature,outcome,method,statistic,p_value,n"
    assert len(lines) == 1 + len(keys) * len(METHODS)


def test_report_errors(small_panel):
    with pytest.raises(DataError):
        correlate_panel(small_panel, outcomes=("bogus",))
    tiny = generate_synthetic_panel(SynthSpec(n_counties=1, n_days=30, n_states=1), seed=0)
    with pytest.raises(DataError):
        correlate_panel(tiny)
