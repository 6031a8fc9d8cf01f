from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bitekit import dist
from bitekit.errors import EmptyDistribution, NonpositiveMeanWage, ZeroWageMass
from bitekit.ingest import BracketScheme, GroupedDistribution

S3 = BracketScheme.uniform(3, 200)


def gd(employees, mass, scheme=S3):
    return GroupedDistribution(scheme, np.array(employees, float), np.array(mass, float), "X", 2019)


def mad_gini(employees, wage_mass):
    """Gini as mean absolute difference over the population, groups at
    their implied mean wage."""
    e = np.asarray(employees, float)
    m = np.asarray(wage_mass, float)
    keep = e > 0
    e, m = e[keep], m[keep]
    f = e / e.sum()
    w = m / e
    mu = f @ w
    return float(np.sum(f[:, None] * f[None, :] * np.abs(w[:, None] - w[None, :])) / (2 * mu))


def test_grouped_mean():
    assert dist.grouped_mean(gd([10, 0, 0], [200000, 0, 0], BracketScheme.uniform(3, 30000))) == 20000
    two = gd([1, 1, 0], [10000, 30000, 0], BracketScheme.uniform(3, 20000))
    assert dist.grouped_mean(two) == 20000
    with pytest.raises(EmptyDistribution):
        dist.grouped_mean(gd([0, 0, 0], [0, 0, 0]))


def test_national_mean_2019(census):
    g = dist.pool([d for d in census.distributions() if d.year == 2019])
    real = census.deflator.deflate(dist.grouped_mean(g), 2019)
    assert abs(real / 20711 - 1) < 0.01


def test_effective_bite_interpolates():
    g = gd([10, 30, 60], [1000, 9000, 30000])
    b = dist.effective_bite(g, 300)
    assert b.percentile == 25.0
    assert b.bracket_index == 1
    assert b.interpolation_fraction == 0.5
    assert dist.effective_bite(g, 0).percentile == 0.0
    assert dist.effective_bite(g, 600).percentile == 100.0
    assert dist.effective_bite(g, 1e6).percentile == 100.0
    assert dist.effective_bite(g, 100).percentile == 5.0
    assert dist.effective_bite(g, 500).percentile == 70.0


@given(st.lists(st.floats(0, 700), min_size=2, max_size=10))
def test_effective_bite_monotone(smis):
    g = gd([3, 7, 5], [300, 2100, 2500])
    vals = [dist.effective_bite(g, s).percentile for s in sorted(smis)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_gini_perfect_equality():
    assert dist.grouped_gini(gd([0, 25, 0], [0, 7500, 0])) == 0.0


def test_gini_two_point_half():
    assert dist.grouped_gini(gd([1, 1, 0], [0, 300, 0])) == 0.5


def test_gini_three_bracket_oracle():
    g = gd([50, 30, 20], [4000, 6000, 10000])
    assert dist.grouped_gini(g) == pytest.approx(mad_gini(g.employees, g.wage_mass), abs=1e-15)
    assert dist.grouped_gini(g) == pytest.approx(0.39, abs=1e-15)


def test_gini_errors():
    with pytest.raises(ZeroWageMass):
        dist.grouped_gini(gd([1, 0, 0], [0, 0, 0]))
    with pytest.raises(EmptyDistribution):
        dist.grouped_gini(gd([0, 0, 0], [0, 0, 0]))


groups = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        arrays(float, n, elements=st.floats(0.01, 1000)),
        arrays(float, n, elements=st.floats(0.0, 1e5)),
    )
)


@settings(max_examples=200)
@given(groups)
def test_gini_matches_mean_difference(g):
    e, w = g
    assume(w.sum() > 0)
    assert dist.lorenz_gini(e, e * w) == pytest.approx(mad_gini(e, e * w), abs=1e-10)


@settings(max_examples=200)
@given(groups, st.floats(1e-3, 1e3))
def test_gini_scale_invariant_and_bounded(g, c):
    e, w = g
    assume(w.sum() > 0)
    a = dist.lorenz_gini(e, e * w)
    assert 0.0 <= a < 1.0
    assert dist.lorenz_gini(e, c * e * w) == pytest.approx(a, abs=1e-12)


@settings(max_examples=200)
@given(groups, st.data())
def test_merging_adjacent_groups_never_raises_gini(g, data):
    e, w = g
    assume(w.sum() > 0)
    order = np.argsort(w, kind="stable")
    e, w = e[order], w[order]
    k = data.draw(st.integers(0, len(e) - 2))
    m = e * w
    e2 = np.concatenate([e[:k], [e[k] + e[k + 1]], e[k + 2:]])
    m2 = np.concatenate([m[:k], [m[k] + m[k + 1]], m[k + 2:]])
    assert dist.lorenz_gini(e2, m2) <= dist.lorenz_gini(e, m) + 1e-12


def test_gini_zero_only_under_equality():
    assert dist.lorenz_gini([1, 2, 3], [10, 20, 30]) == 0.0
    assert dist.lorenz_gini([1, 2, 3], [10, 20, 31]) > 0.0


def test_kaitz_ratios():
    assert round(dist.kaitz_ratio(12600, 20711).ratio, 4) == 0.6084
    assert round(dist.kaitz_ratio(10375, 20090).ratio, 4) == 0.5164
    assert round(dist.kaitz_ratio(12600, 20711).ratio, 3) == 0.608
    assert round(dist.kaitz_ratio(10375, 20090).ratio, 3) == 0.516
    assert dist.kaitz_ratio(13000.0, 13000.0).ratio == 1.0
    with pytest.raises(NonpositiveMeanWage):
        dist.kaitz_ratio(1.0, 0.0)


def test_pool_sums_regions():
    a = gd([1, 2, 0], [100, 500, 0])
    b = gd([0, 1, 4], [0, 300, 2000])
    p = dist.pool([a, b])
    assert p.employees.tolist() == [1, 3, 4]
    assert p.wage_mass.tolist() == [100, 800, 2000]
