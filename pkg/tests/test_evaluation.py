import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ecg_icd import evaluation as ev
from ecg_icd.exceptions import AllUndefined, BadLengthWarning, RecordTooShort, ShapeMismatch


# -- AUROC ---------------------------------------------------------------------------------

def test_auroc_examples():
    assert ev.auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert ev.auroc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert ev.auroc([0.1, 0.2, 0.2, 0.9], [0, 1, 0, 1]) == 0.875
    assert math.isnan(ev.auroc([0.1, 0.2], [1, 1]))
    with pytest.raises(ShapeMismatch):
        ev.auroc([0.1, 0.2], [1, 0, 1])


def test_midranks():
    assert ev.midranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_macro_examples():
    P = np.array([[0.9, 0.1], [0.8, 0.1], [0.2, 0.1], [0.1, 0.1]])
    Y = np.array([[1, 1], [1, 0], [0, 1], [0, 0]])
    r = ev.macro_auroc(P, Y)
    assert r.macro == 0.75 and r.per_label.tolist() == [1.0, 0.5]
    Y2 = np.array([[1, 1], [1, 1], [0, 1], [0, 1]])
    r2 = ev.macro_auroc(P, Y2)
    assert r2.macro == 1.0 and r2.skipped == [1]
    with pytest.raises(AllUndefined):
        ev.macro_auroc(P, np.ones_like(Y))
    with pytest.raises(ShapeMismatch):
        ev.macro_auroc(np.array([[np.nan, 0.1]] * 4), Y)


labelled = st.integers(2, 80).flatmap(lambda n: st.tuples(
    arrays(np.int32, n, elements=st.integers(-10_000, 10_000)).map(lambda a: a / 100),
    arrays(np.int8, n, elements=st.integers(0, 1))))


@settings(max_examples=200, deadline=None)
@given(labelled)
def test_auroc_properties(case):
    s, y = case
    assume(0 < y.sum() < len(y))
    a = ev.auroc(s, y)
    assert abs(a - ev.auroc_pairs(s, y)) < 1e-12
    assert abs(ev.auroc(np.exp(s / 50) + 3 * s, y) - a) < 1e-12  # strictly increasing map
    if len(np.unique(s)) == len(s):
        assert abs(a + ev.auroc(-s, y) - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_macro_invariant_under_column_permutation(seed):
    rng = np.random.default_rng(seed)
    P, Y = rng.random((30, 6)), (rng.random((30, 6)) < 0.4)
    Y[0], Y[1] = True, False
    perm = rng.permutation(6)
    a, b = ev.macro_auroc(P, Y), ev.macro_auroc(P[:, perm], Y[:, perm])
    assert abs(a.macro - b.macro) < 1e-12
    assert np.array_equal(a.per_label[perm], b.per_label)


# -- bootstrap -------------------------------------------------------------------------------

def _explicit_distribution(P, Y, n_boot, seed):
    out = []
    for _, idx in ev.bootstrap_indices(len(P), n_boot, seed):
        for row in idx:
            out.append([ev.auroc(P[row, j], Y[row, j]) for j in range(P.shape[1])])
    return np.array(out)


def test_fast_bootstrap_equals_explicit_resampling():
    rng = np.random.default_rng(0)
    P = np.round(rng.random((40, 3)), 1)  # many ties
    Y = rng.random((40, 3)) < np.array([0.5, 0.1, 0.03])
    fast = ev.bootstrap_distribution(P, Y, n_boot=120, seed=4)
    slow = _explicit_distribution(P, Y, 120, 4)
    assert np.array_equal(np.isnan(fast), np.isnan(slow))
    ok = ~np.isnan(slow)
    assert np.abs(fast[ok] - slow[ok]).max() < 1e-12


def test_bootstrap_identity_indices_returns_point():
    rng = np.random.default_rng(1)
    P, Y = rng.random((25, 4)), rng.random((25, 4)) < 0.5
    r = ev.bootstrap_ci(P, Y, indices=np.arange(25)[None, :])
    assert r.n_boot == 1
    assert np.allclose(r.low, r.point, rtol=0, atol=1e-15) and np.allclose(r.high, r.point, rtol=0, atol=1e-15)


def test_degenerate_bootstrap_collapses_interval():
    Y = np.array([1, 0] * 20)
    r = ev.bootstrap_ci(Y.astype(float), Y, n_boot=200, seed=0)
    assert r.low[0] == r.high[0] == r.point[0] == 1.0
    assert r.macro_low == r.macro_high == r.macro == 1.0


def test_bootstrap_determinism_and_methods():
    rng = np.random.default_rng(2)
    P, Y = rng.random((60, 2)), rng.random((60, 2)) < 0.5
    a = ev.bootstrap_ci(P, Y, n_boot=300, seed=9)
    b = ev.bootstrap_ci(P, Y, n_boot=300, seed=9)
    c = ev.bootstrap_ci(P, Y, n_boot=300, seed=10)
    assert a.low.tobytes() == b.low.tobytes() and a.low.tobytes() != c.low.tobytes()
    basic = ev.bootstrap_ci(P, Y, n_boot=300, seed=9, method="basic")
    assert np.allclose(basic.low, 2 * a.point - a.high) and np.allclose(basic.high, 2 * a.point - a.low)
    assert np.all(a.low <= a.high)
    with pytest.raises(ValueError):
        ev.bootstrap_ci(P, Y, n_boot=10, method="bca")
    with pytest.raises(ValueError):
        ev.bootstrap_ci(P, Y, n_boot=0)


def test_bootstrap_rare_label_undefined_in_some_resamples():
    y = np.zeros(50, dtype=int)
    y[0] = 1
    P = np.c_[np.linspace(0, 1, 50), np.linspace(0, 1, 50)]
    Y = np.c_[y, np.arange(50) % 2]
    dist = ev.bootstrap_distribution(P, Y, n_boot=200, seed=0)
    assert np.isnan(dist[:, 0]).any() and not np.isnan(dist[:, 1]).any()
    r = ev.bootstrap_ci(P, Y, n_boot=200, seed=0)
    assert math.isfinite(r.macro_low) and math.isfinite(r.low[0])


def test_paired_shape_checks():
    with pytest.raises(ShapeMismatch):
        ev.paired_significance(np.zeros((5, 2)), np.zeros((5, 3)), np.zeros((5, 2)))


# -- crop averaging ------------------------------------------------------------------------------

def test_crop_average_examples():
    import torch

    const = lambda x: torch.full((x.shape[0], 2), math.log(0.3 / 0.7), dtype=torch.float64)
    out = ev.crop_average(const, np.zeros((3, 12, 1000)))
    assert out.shape == (3, 2) and np.allclose(out, 0.3, rtol=0, atol=1e-15)

    # crop c scores logit((c + 1) / 5): 0.2, 0.4, 0.6, 0.8; plain callables see float32 input
    def ramp(x):
        p = torch.as_tensor(x[:, 0, :1], dtype=torch.float64)
        return torch.log(p / (1 - p))
    X = np.repeat(np.arange(1, 5) / 5, 250)[None, None, :]
    assert abs(ev.crop_average(ramp, X)[0, 0] - 0.5) < 1e-7


def test_crop_average_length_fallback():
    import torch

    model = lambda x: torch.zeros(x.shape[0], 1)
    with pytest.warns(BadLengthWarning):
        out = ev.crop_average(model, np.zeros((2, 1, 600)))
    assert np.all(out == 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BadLengthWarning)
        with pytest.raises(RecordTooShort):
            ev.crop_average(model, np.zeros((2, 1, 100)))


# -- prevalence and MCC ------------------------------------------------------------------------

def test_prevalence_examples():
    assert ev.prevalence(np.ones((4, 1))).tolist() == [1.0]
    assert ev.prevalence(np.array([1, 0, 0, 0])).tolist() == [0.25]


def test_mcc_examples():
    x = np.array([1, 1, 0, 0, 1])
    m = ev.mcc_matrix(np.c_[x, 1 - x, np.ones(5)])
    assert m[0, 0] == 1.0 and m[0, 1] == -1.0
    assert np.isnan(m[2, 2]) and np.isnan(m[0, 2])
    assert ev.mcc_matrix(np.c_[[1, 1, 0, 0], [1, 0, 1, 0]])[0, 1] == 0.0


@settings(max_examples=100, deadline=None)
@given(arrays(np.int8, st.tuples(st.integers(1, 40), st.integers(1, 6)), elements=st.integers(0, 1)))
def test_mcc_symmetric_and_bounded(Y):
    m = ev.mcc_matrix(Y)
    assert np.array_equal(np.isnan(m), np.isnan(m.T))
    ok = ~np.isnan(m)
    assert np.allclose(m[ok], m.T[ok], rtol=0, atol=1e-15)
    assert np.all(np.abs(m[ok]) <= 1 + 1e-12)


def test_mcc_matches_pairwise_formula():
    rng = np.random.default_rng(3)
    Y = (rng.random((50, 4)) < 0.3).astype(int)
    m = ev.mcc_matrix(Y)
    a, b = Y[:, 1], Y[:, 3]
    n11, n00 = np.sum(a & b), np.sum((1 - a) & (1 - b))
    n10, n01 = np.sum(a & (1 - b)), np.sum((1 - a) & b)
    want = (n11 * n00 - n10 * n01) / math.sqrt(a.sum() * (50 - a.sum()) * b.sum() * (50 - b.sum()))
    assert abs(m[1, 3] - want) < 1e-12


def test_top_correlations_skip_ancestors():
    Y = np.array([[1, 1, 1, 0], [1, 1, 1, 0], [0, 0, 0, 1], [0, 0, 1, 1]])
    pairs = ev.top_correlations(ev.mcc_matrix(Y), ["I48", "I489", "Z66", "E11"], k=5)
    assert all(not (a.startswith(b) or b.startswith(a)) for a, b, _ in pairs)
    assert pairs[0][:2] in {("I48", "Z66"), ("I489", "Z66")}


# -- reports and coverage ---------------------------------------------------------------------------

def _report(values, prevalences=None):
    prevalences = prevalences or {}
    labels = [ev.LabelResult(c, a, math.nan, math.nan, prevalences.get(c, 0.01), 1) for c, a in values.items()]
    return ev.EvalReport(labels, float(np.nanmean(list(values.values()))), math.nan, math.nan, [], 0, 0)


def test_coverage_examples():
    rep = _report({"I48": 0.95, "I481": 0.97, "I489": 0.85, "E11": 0.5, "E119": 0.6},
                  {"I48": 0.15, "E11": 0.2})
    rows = {r.code3: r for r in ev.coverage_table(rep, 0.9)}
    assert (rows["I48"].covered, rows["I48"].total, rows["I48"].coverage) == (2, 3, "2/3")
    assert all(r.covered == r.total for r in ev.coverage_table(rep, 0.0))
    assert sum(r.total for r in ev.coverage_table(rep, 0.9)) == 5
    below = {r.code3: r.covered for r in ev.coverage_table(rep, 0.7, "below")}
    assert below == {"I48": 0, "E11": 2}
    assert [r.code3 for r in ev.coverage_table(rep, 0.9, only_covered=True)] == ["I48"]
    with pytest.raises(ValueError):
        ev.coverage_table(rep, 0.9, "sideways")


def test_coverage_ordering():
    rep = _report({"Z66": 0.9, "I10": 0.7, "I48": 0.8, "I21": 0.8, "A41": 0.6},
                  {"Z66": 0.5, "I10": 0.3, "I48": 0.3, "I21": 0.4, "A41": 0.01})
    order = [r.code3 for r in ev.coverage_table(rep, 0.5)]
    assert order == ["A41", "I21", "I10", "I48", "Z66"]


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.sampled_from(["I48", "I489", "I4891", "E11", "E119", "Z66", "A00", "A009"]),
                       st.floats(0, 1), min_size=1), st.floats(0, 1))
def test_coverage_totals_sum_to_label_count(values, thr):
    rows = ev.coverage_table(_report(values), thr)
    assert sum(r.total for r in rows) == len(values)
    assert all(0 <= r.covered <= r.total for r in rows)


def test_report_round_trips(tmp_path):
    rng = np.random.default_rng(4)
    P, Y = rng.random((80, 3)), rng.random((80, 3)) < 0.3
    Y[:, 2] = False
    rep = ev.evaluate(P, Y, ["I48", "I489", "Z66"], n_boot=100, seed=1,
                      descriptions={"I48": "Atrial fibrillation, flutter"}, scenario="T(ED2ALL)-E(ED2ALL)")
    assert rep.skipped == ["Z66"] and rep.labels[0].description == "Atrial fibrillation, flutter"
    rep.to_json(tmp_path / "r.json")
    back = ev.EvalReport.from_json(tmp_path / "r.json")
    assert back.to_json() == rep.to_json()
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(ev.REPORT_COLUMNS)
    from_csv = ev.EvalReport.from_csv(tmp_path / "r.csv")
    assert [r.auroc for r in from_csv.labels][:2] == [r.auroc for r in rep.labels][:2]
    assert from_csv.to_csv() == rep.to_csv()
    with pytest.raises(ShapeMismatch):
        ev.evaluate(P, Y, ["I48"], n_boot=10)


def test_chapter_macro_auroc():
    rep = _report({"I48": 0.9, "I10": 0.7, "Z66": 0.95, "E11": math.nan})
    assert ev.chapter_macro_auroc(rep) == [("XXI", 0.95, 1), ("IX", pytest.approx(0.8), 2)]


def test_coverage_csv_layout():
    rep = _report({"I48": 0.95, "I489": 0.8}, {"I48": 0.1519})
    text = ev.coverage_csv(ev.coverage_table(rep, 0.9, descriptions={"I48": "AF"}))
    assert text.splitlines() == ["chapter,code,coverage,prevalence,description", "IX,I48,1/2,0.152,AF"]
