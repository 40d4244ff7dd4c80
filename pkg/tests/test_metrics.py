import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from mrunet import datapipe as dp
from mrunet.errors import DegenerateVarianceError, ShapeError, ValidationError
from mrunet.metrics import (
    MetricsReport,
    betainc,
    binarize,
    confusion,
    mean_sd,
    paired_t_one_tailed,
    read_metrics_csv,
    segmentation_metrics,
    t_sf,
    write_metrics_csv,
)


def brute_force(pred, ref):
    tp = fp = tn = fn = 0
    for p, r in zip(pred.ravel().tolist(), ref.ravel().tolist()):
        if p and r:
            tp += 1
        elif p:
            fp += 1
        elif r:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def test_binarize():
    assert list(binarize(np.array([0.49, 0.51, 0.5]))) == [False, True, True]
    assert not binarize(np.zeros((3, 3))).any()
    with pytest.raises(ValidationError):
        binarize(np.array([1.2]))
    with pytest.raises(ValidationError):
        binarize(np.array([-0.1]))


def test_metrics_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        density = rng.random(2)
        pred = rng.random((16, 16)) < density[0]
        ref = rng.random((16, 16)) < density[1]
        c, d, se, sp = segmentation_metrics(pred, ref)
        tp, fp, tn, fn = brute_force(pred, ref)
        assert (c.tp, c.fp, c.tn, c.fn) == (tp, fp, tn, fn)
        assert c.total == 256
        if tp + fp + fn:
            assert d == 200 * tp / (2 * tp + fp + fn)
        if tp + fn:
            assert se == 100 * tp / (tp + fn)
        if tn + fp:
            assert sp == 100 * tn / (tn + fp)


def test_worked_example():
    pred = np.array([1, 1, 1, 1, 0] + [0] * 11)
    ref = np.array([1, 1, 1, 0, 1] + [0] * 11)
    c, d, se, sp = segmentation_metrics(pred, ref)
    assert (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 11)
    assert round(d, 2) == 75.0 and round(se, 2) == 75.0 and round(sp, 2) == 91.67


def test_identity_and_empty_prediction():
    ref = np.zeros((4, 4), bool)
    ref[:2] = True
    assert segmentation_metrics(ref, ref)[1:] == (100.0, 100.0, 100.0)
    assert segmentation_metrics(np.zeros_like(ref), ref)[1:] == (0.0, 0.0, 100.0)


def test_empty_class_conventions():
    empty = np.zeros((3, 3), bool)
    full = np.ones((3, 3), bool)
    some = empty.copy()
    some[0, 0] = True
    assert segmentation_metrics(empty, empty)[1:3] == (100.0, 100.0)
    assert segmentation_metrics(some, empty)[1:3] == (0.0, 0.0)
    assert segmentation_metrics(full, full)[3] == 100.0
    assert segmentation_metrics(~some, full)[3] == 0.0


def test_metric_errors():
    with pytest.raises(ShapeError):
        segmentation_metrics(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        segmentation_metrics(np.full((2, 2), 0.5), np.zeros((2, 2)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dsc_symmetry_and_dihedral_invariance(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 8, 8)) > 0.5
    assert segmentation_metrics(a, b)[1] == segmentation_metrics(b, a)[1]
    c0 = confusion(a, b)
    for g in dp.D4:
        assert confusion(dp.apply_transform(a, g), dp.apply_transform(b, g)) == c0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_sensitivity_ignores_reference_background(seed):
    r = np.random.default_rng(seed)
    pred, ref = r.random((2, 8, 8)) > 0.5
    flipped = pred.copy()
    bg = ~ref
    flipped[bg] = r.random(bg.sum()) > 0.5
    assert segmentation_metrics(pred, ref)[2] == segmentation_metrics(flipped, ref)[2]
    flipped = pred.copy()
    flipped[ref] = r.random(ref.sum()) > 0.5
    assert segmentation_metrics(pred, ref)[3] == segmentation_metrics(flipped, ref)[3]


def test_report_aggregate_and_csv(tmp_path, rng):
    report = MetricsReport()
    for i in range(5):
        report.add(f"img{i}", rng.random((8, 8)) > 0.5, rng.random((8, 8)) > 0.5)
    agg = report.aggregate()
    assert agg["dsc"][0] == pytest.approx(np.mean(report.dsc))
    assert agg["dsc"][1] == pytest.approx(np.std(report.dsc, ddof=1))
    for vals in (report.dsc, report.sensitivity, report.specificity):
        assert all(0 <= v <= 100 for v in vals)
    path = write_metrics_csv(report, tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "id,dsc,sensitivity,specificity"
    assert lines[-1].startswith("aggregate,") and len(lines[-1].split(",")) == 7
    back = read_metrics_csv(path)
    assert back.ids == report.ids and back.dsc == report.dsc
    assert back.specificity == report.specificity
    footer = [float(v) for v in lines[-1].split(",")[1:]]
    assert footer == [x for m in ("dsc", "sensitivity", "specificity") for x in agg[m]]


def test_mean_sd():
    assert mean_sd([5.0]) == (5.0, 0.0)
    assert mean_sd([1.0, 3.0]) == (2.0, pytest.approx(np.sqrt(2)))
    with pytest.raises(ValidationError):
        mean_sd([])


# --- t-test ---

def t_sf_quad(t, df):
    """Independent oracle: integrate the t density numerically."""
    df = mpmath.mpf(df)
    c = mpmath.gamma((df + 1) / 2) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
    return float(mpmath.quad(lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2), [t, mpmath.inf]))


def test_ttest_worked_example():
    res = paired_t_one_tailed([0, 0, 0, 0, 0], [1, 2, 3, 4, 5])
    assert res.df == 4
    assert res.t == pytest.approx(4.2426, abs=1e-3)
    assert res.t == pytest.approx(np.sqrt(18), rel=1e-14)
    assert res.p == pytest.approx(0.0066, abs=1e-3)
    assert res.p == pytest.approx(t_sf_quad(np.sqrt(18), 4), rel=1e-9)
    ref = stats.ttest_rel([1, 2, 3, 4, 5], [0, 0, 0, 0, 0], alternative="greater")
    assert res.p == pytest.approx(ref.pvalue, rel=1e-9)
    assert res.significant


def test_ttest_wrong_direction(rng):
    a = rng.uniform(50, 90, size=12)
    b = a - 1 + rng.normal(scale=0.1, size=12)
    res = paired_t_one_tailed(a, b)
    assert res.t < 0 and res.p > 0.5 and not res.significant


def test_ttest_errors():
    with pytest.raises(DegenerateVarianceError):
        paired_t_one_tailed([1, 2, 3], [1, 2, 3])
    with pytest.raises(DegenerateVarianceError):
        paired_t_one_tailed([1, 2, 3], [0, 1, 2])  # constant offset has zero spread too
    with pytest.raises(ValidationError):
        paired_t_one_tailed([1], [2])
    with pytest.raises(ValidationError):
        paired_t_one_tailed([1, 2], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40))
def test_significance_flag_is_p_below_alpha(seed, n):
    r = np.random.default_rng(seed)
    a = r.normal(size=n)
    res = paired_t_one_tailed(a, a + r.normal(0.3, 1.0, size=n))
    assert 0 <= res.p <= 1
    assert res.significant == (res.p < 0.05)


def test_p_decreases_with_mean_difference():
    base = np.array([-1.0, 0.5, 0.0, 1.5, -1.0])
    ps = [paired_t_one_tailed(np.zeros(5), base + shift).p for shift in np.linspace(-2, 3, 26)]
    assert all(x > y for x, y in zip(ps, ps[1:]))


@pytest.mark.parametrize("df", [1, 2, 4, 9, 30, 200])
@pytest.mark.parametrize("t", [-3.0, -0.2, 0.0, 0.7, 2.5, 12.0])
def test_t_sf_against_scipy(t, df):
    assert t_sf(t, df) == pytest.approx(stats.t.sf(t, df), rel=1e-8, abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0.05, 50), b=st.floats(0.05, 50), x=st.floats(0, 1))
def test_betainc_against_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-8, abs=1e-12)
