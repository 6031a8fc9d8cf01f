from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from bitekit import synth


@pytest.fixture(scope="session")
def census():
    return synth.generate_census(synth.DgpSpec())


@pytest.fixture(scope="session")
def census_dir(tmp_path_factory, census):
    d = tmp_path_factory.mktemp("census")
    census.write(d)
    return d


def random_panel(rng: np.random.Generator, n_units: int = 90, n_years: int = 15, n_clusters: int = 15) -> pd.DataFrame:
    """Balanced panel with unit/year effects, one exposure and noise."""
    units = [f"u{i:03d}" for i in range(n_units)]
    years = list(range(2009, 2009 + n_years))
    region = {u: f"r{i % n_clusters:02d}" for i, u in enumerate(units)}
    a = rng.normal(size=n_units)
    lam = rng.normal(size=n_years)
    rows = []
    for i, u in enumerate(units):
        for j, y in enumerate(years):
            rows.append((u, y, region[u], a[i] + lam[j] + rng.normal()))
    return pd.DataFrame(rows, columns=["unit", "year", "cluster", "outcome"])


def random_exposures(rng: np.random.Generator, units) -> pd.DataFrame:
    n = len(units)
    return pd.DataFrame(
        {
            "unit": list(units),
            "d_youth": rng.uniform(0.5, 1.0, n),
            "d_kaitz": rng.uniform(0.3, 1.5, n),
            "d_gap": rng.exponential(0.05, n),
            "d_sectoral": rng.uniform(0.2, 0.9, n),
            "tourism": rng.normal(size=n),
        }
    )


def kl(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def _grid_kl(w, q, target, lo, hi, step):
    """KL(p||q) minimum over simplex points whose first n - 2 coordinates lie
    on a ``step`` grid inside ``[lo, hi]``; the last two probabilities are
    solved from the sum and mean constraints."""
    n = len(w)
    if n == 2:
        heads = np.zeros((1, 0))
    else:
        axes = [np.arange(a, b + step / 2, step) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        heads = np.stack([m.ravel() for m in mesh], axis=1)
        heads = heads[(heads.sum(axis=1) <= 1.0 + 1e-12) & np.all(heads >= 0, axis=1)]
    rest = 1.0 - heads.sum(axis=1)
    rest_mean = target - heads @ w[: n - 2]
    a, b = w[n - 2], w[n - 1]
    p_b = (rest_mean - a * rest) / (b - a)
    P = np.column_stack([heads, rest - p_b, p_b])
    ok = np.all(P >= -1e-12, axis=1)
    P = np.clip(P[ok], 0.0, None)
    if len(P) == 0:
        return np.inf, None
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(P / q), 0.0)
    terms = np.where((P > 0) & (q == 0), np.inf, terms)
    vals = terms.sum(axis=1)
    i = int(np.argmin(vals))
    return float(vals[i]), P[i, : n - 2]


def grid_kl_minimum(w, q, target, step=1e-3, refine=False):
    """Smallest KL(p||q) over the simplex grid of spacing ``step`` that meets
    the mean exactly. With ``refine`` the search then zooms on the best
    grid point: a window of five steps either side is re-gridded and
    recentred until it stops improving, then the spacing shrinks tenfold,
    down to 1e-9."""
    w = np.asarray(w, float)
    q = np.asarray(q, float)
    k = len(w) - 2
    best, head = _grid_kl(w, q, target, [0.0] * k, [1.0] * k, step)
    while refine and k > 0 and step > 1e-9 and head is not None:
        for _ in range(1000):
            val, h = _grid_kl(w, q, target, np.maximum(head - 5 * step, 0.0), head + 5 * step, step)
            if not val < best:
                break
            best, head = val, h
        step /= 10.0
    return best
