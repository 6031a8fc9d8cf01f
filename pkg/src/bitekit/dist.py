"""Statistics on grouped (bracketed) wage data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDistribution, NonpositiveMeanWage, ValidationError, ZeroWageMass
from .ingest import GroupedDistribution


@dataclass(frozen=True)
class EffectiveBite:
    percentile: float
    bracket_index: int
    interpolation_fraction: float


@dataclass(frozen=True)
class KaitzRatio:
    smi: float
    mean_wage: float
    ratio: float


def _require_employment(g: GroupedDistribution) -> float:
    total = g.employees.sum()
    if not total > 0:
        raise EmptyDistribution(f"distribution ({g.region}, {g.year}) has no employees")
    return float(total)


def grouped_mean(g: GroupedDistribution) -> float:
    total = _require_employment(g)
    return float(g.wage_mass.sum() / total)


def effective_bite(g: GroupedDistribution, smi: float) -> EffectiveBite:
    """Population percentile at which ``smi`` falls, interpolating linearly
    in employment within the bracket that contains it."""
    total = _require_employment(g)
    if smi < 0:
        raise ValidationError(f"minimum wage must be non-negative, got {smi}")
    scheme = g.scheme
    first = scheme.lower_edges[0]
    if smi <= first:
        return EffectiveBite(0.0, 0, 0.0)
    if smi >= scheme.top:
        return EffectiveBite(100.0, scheme.count - 1, 1.0)
    k = int(np.floor((smi - first) / scheme.width))
    k = min(max(k, 0), scheme.count - 1)
    frac = (smi - scheme.lower_edges[k]) / scheme.width
    below = g.employees[:k].sum() / total
    share = g.employees[k] / total
    return EffectiveBite(float(100.0 * (below + frac * share)), k, float(frac))


def lorenz_curve(employees, wage_mass) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative employment and wage-mass shares, groups ordered by implied
    mean wage, starting at (0, 0). Empty groups are dropped."""
    e = np.asarray(employees, dtype=float)
    m = np.asarray(wage_mass, dtype=float)
    keep = e > 0
    e, m = e[keep], m[keep]
    if e.size == 0:
        raise EmptyDistribution("no employees")
    if not m.sum() > 0:
        raise ZeroWageMass("total wage mass is zero")
    order = np.argsort(m / e, kind="stable")
    e, m = e[order], m[order]
    F = np.concatenate([[0.0], np.cumsum(e) / e.sum()])
    Phi = np.concatenate([[0.0], np.cumsum(m) / m.sum()])
    return F, Phi


def lorenz_gini(employees, wage_mass) -> float:
    """Gini index from grouped data by the trapezoid rule on the Lorenz curve.

    Exact when wages are equal within each group.
    """
    F, Phi = lorenz_curve(employees, wage_mass)
    g = 1.0 - float(np.sum(np.diff(F) * (Phi[1:] + Phi[:-1])))
    # rounding can leave -1e-17 for perfect equality
    return max(g, 0.0)


def grouped_gini(g: GroupedDistribution) -> float:
    _require_employment(g)
    if not g.wage_mass.sum() > 0:
        raise ZeroWageMass(f"distribution ({g.region}, {g.year}) has zero wage mass")
    return lorenz_gini(g.employees, g.wage_mass)


def kaitz_ratio(smi: float, mean_wage: float) -> KaitzRatio:
    if not mean_wage > 0:
        raise NonpositiveMeanWage(f"mean wage must be positive, got {mean_wage}")
    return KaitzRatio(float(smi), float(mean_wage), float(smi) / float(mean_wage))


def pool(dists, region: str = "ALL") -> GroupedDistribution:
    """Sum distributions sharing a scheme and year (e.g. a national total)."""
    dists = list(dists)
    if not dists:
        raise EmptyDistribution("nothing to pool")
    years = {g.year for g in dists}
    if len(years) != 1:
        raise ValidationError(f"cannot pool across years {sorted(years)}")
    scheme = dists[0].scheme
    e = np.sum([g.employees for g in dists], axis=0)
    m = np.sum([g.wage_mass for g in dists], axis=0)
    return GroupedDistribution(scheme, e, m, region, years.pop())
