from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bitekit import fe, honest
from bitekit.errors import InvalidSpec, MissingTarget, NoPrePeriods
from bitekit.honest import SensitivitySpec

Z = stats.norm.ppf(0.975)


def event_fit(pre: dict, post: dict, se: float | dict = 0.05, reference_year: int = 2018) -> fe.FixedEffectsFit:
    coefs = {f"beta_{y}": v for y, v in {**pre, **post}.items()}
    names = sorted(coefs)
    ses = se if isinstance(se, dict) else {n: se for n in names}
    years = sorted({*pre, *post, reference_year})
    return fe.FixedEffectsFit(
        design=fe.DesignSpec("event", reference_year=reference_year),
        names=names,
        coef=np.array([coefs[n] for n in names], float),
        vcov=np.diag([ses[n] ** 2 for n in names]),
        within_r2=0.0,
        n_obs=90 * len(years),
        n_clusters=15,
        n_units=90,
        years=years,
        residuals=np.zeros(0),
        dof_k=len(names) + len(years) - 1,
        dof_rule="nested",
    )


def scan_breakdown(fit, spec, step=1e-4, top=5.0):
    """Smallest grid mbar whose robust interval covers zero."""
    for m in np.arange(0.0, top + step, step):
        if honest.robust_interval(fit, spec, float(m)).contains_zero:
            return float(m)
    return math.inf


def test_worked_interval():
    f = event_fit({2017: 0.08, 2016: -0.02}, {2019: 0.10})
    ri = honest.robust_interval(f, SensitivitySpec(), 1.0)
    assert ri.bias_bound == pytest.approx(0.08, abs=1e-15)
    assert round(ri.lower, 3) == -0.078 and round(ri.upper, 3) == 0.278
    assert ri.lower == pytest.approx(0.10 - 0.08 - Z * 0.05, abs=1e-15)


def test_worked_breakdown():
    f = event_fit({2017: 0.5}, {2019: 0.20})
    b = honest.breakdown_mbar(f)
    assert round(b.mbar_star, 3) == 0.204
    assert b.mbar_star == pytest.approx((0.20 - Z * 0.05) / 0.5, rel=1e-14)
    assert honest.robust_interval(f, mbar=b.mbar_star).lower == pytest.approx(0.0, abs=1e-15)


def test_mbar_zero_bit_identical_to_conventional():
    rng = np.random.default_rng(0)
    for _ in range(200):
        f = event_fit({y: rng.normal(0, 0.1) for y in range(2010, 2018)}, {2019: rng.normal(0, 0.3)}, float(rng.uniform(0.01, 0.2)))
        lo, hi = honest.conventional_interval(f)
        ri = honest.robust_interval(f, mbar=0.0)
        assert (ri.lower, ri.upper) == (lo, hi)


def test_zero_pretrend_gives_flat_curve_and_infinite_breakdown():
    f = event_fit({2016: 0.0, 2017: 0.0}, {2019: 0.3})
    curve = honest.sensitivity_curve(f)
    assert len({(r.lower, r.upper) for r in curve}) == 1
    b = honest.breakdown_mbar(f)
    assert not b.finite and b.mbar_star == math.inf


def test_insignificant_estimate_breaks_down_at_zero():
    f = event_fit({2017: 0.1}, {2019: 0.05})
    assert honest.breakdown_mbar(f).mbar_star == 0.0
    assert all(r.contains_zero for r in honest.sensitivity_curve(f))


def random_fit(rng):
    h = int(rng.integers(1, 5))
    pre = {y: float(rng.normal(0, 0.08)) for y in range(2012, 2018)}
    post = {2018 + k: float(rng.normal(0, 0.4)) for k in range(1, 5)}
    return event_fit(pre, post, float(rng.uniform(0.01, 0.15))), SensitivitySpec(target_year=2018 + h)


def test_closed_form_breakdown_matches_grid_scan():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 25:
        f, spec = random_fit(rng)
        b = honest.breakdown_mbar(f, spec).mbar_star
        if b > 4.9:
            continue
        scan = scan_breakdown(f, spec)
        assert scan - 1e-4 - 1e-12 <= b <= scan + 1e-12
        checked += 1


def test_width_affine_in_mbar():
    rng = np.random.default_rng(7)
    for _ in range(100):
        f, spec = random_fit(rng)
        a = honest._inputs(f, spec)
        w0 = honest.robust_interval(f, spec, 0.0).width
        slope = 2 * honest.max_pretrend(f) * a.horizon
        for m in rng.uniform(0, 3, 5):
            assert abs(honest.robust_interval(f, spec, m).width - (w0 + slope * m)) < 1e-12
        widths = [r.width for r in honest.sensitivity_curve(f, spec)]
        assert all(b > a for a, b in zip(widths, widths[1:]))


@settings(max_examples=100)
@given(
    st.lists(st.floats(-0.3, 0.3), min_size=1, max_size=8),
    st.floats(-1, 1),
    st.floats(0.01, 0.3),
    st.integers(0, 7),
    st.floats(1.0, 3.0),
    st.floats(0, 2),
)
def test_larger_pretrend_never_shrinks_intervals(pre, post, se, k, scale, mbar):
    years = list(range(2018 - len(pre), 2018))
    a = event_fit(dict(zip(years, pre)), {2019: post}, se)
    bigger = list(pre)
    bigger[k % len(pre)] *= scale
    b = event_fit(dict(zip(years, bigger)), {2019: post}, se)
    ra, rb = honest.robust_interval(a, mbar=mbar), honest.robust_interval(b, mbar=mbar)
    assert rb.lower <= ra.lower + 1e-15 and rb.upper >= ra.upper - 1e-15


def test_maxpre_rules():
    f = event_fit({2015: 0.05, 2016: 0.10, 2017: 0.02}, {2019: 0.1})
    assert honest.max_pretrend(f, "level") == 0.10
    assert honest.max_pretrend(f, "difference") == pytest.approx(0.08)


def test_t_critical_value_option():
    f = event_fit({2017: 0.08}, {2019: 0.10})
    lo, hi = honest.conventional_interval(f, SensitivitySpec(critical="t"))
    assert hi - 0.10 == pytest.approx(stats.t.ppf(0.975, 14) * 0.05)


def test_errors():
    f = event_fit({2017: 0.08}, {2019: 0.10})
    with pytest.raises(MissingTarget):
        honest.robust_interval(f, SensitivitySpec(target_year=2021))
    with pytest.raises(NoPrePeriods):
        honest.robust_interval(event_fit({}, {2019: 0.1, 2020: 0.2}))
    with pytest.raises(InvalidSpec):
        SensitivitySpec(mbar_grid=(0.1, 0.2))
    with pytest.raises(InvalidSpec):
        SensitivitySpec(mbar_grid=(0.0, 0.5, 0.2))
    with pytest.raises(InvalidSpec):
        SensitivitySpec(alpha=1.0)
    with pytest.raises(InvalidSpec):
        honest.robust_interval(f, mbar=-0.1)


def test_csv_round_trip(tmp_path):
    f = event_fit({2017: 0.08, 2016: 0.03}, {2019: 0.10})
    curves = {"d_youth": honest.sensitivity_curve(f), "d_gap": honest.sensitivity_curve(f, SensitivitySpec(mbar_grid=(0.0,)))}
    path = tmp_path / "sens.csv"
    honest.write_sensitivity_csv(curves, path, header_comment="generated")
    back = honest.read_sensitivity_csv(path)
    assert list(back) == ["d_youth", "d_gap"] and len(back["d_gap"]) == 1
    for m in curves:
        for a, b in zip(curves[m], back[m]):
            assert (a.mbar, a.lower, a.upper) == (b.mbar, b.lower, b.upper)
    assert path.read_text().splitlines()[1] == "measure,mbar,lower,upper,contains_zero"
