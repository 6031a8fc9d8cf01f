"""Treatment-intensity ("bite") measures per region x sector unit.

All four measures are computed from pre-reform (reference-year) inputs:

* youth incidence: share of young employees in the affected tiers;
* monetary gap: wage-bill increase needed to lift affected young workers to
  the new minimum, relative to the unit's total wage bill;
* Kaitz index: old minimum over the unit mean wage;
* sectoral incidence: share of all employees in the affected tiers.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    InsufficientUnits,
    MissingPrePeriod,
    NoEmployment,
    NonpositiveMeanWage,
    NoYoungEmployment,
    ValidationError,
    ZeroWageBill,
)
from .ingest import SECTORS, Deflator, DimensionMapping, RawCellRow, unit_id
from .tilt import ImputedCell, TierScheme

MEASURES = ("d_youth", "d_kaitz", "d_gap", "d_sectoral")
MEASURE_LABELS = {
    "d_youth": "Youth Incidence",
    "d_kaitz": "Kaitz Index",
    "d_gap": "Monetary Gap",
    "d_sectoral": "Sectoral Incidence",
}
# Trade & hospitality and transport in the default raw coding.
DEFAULT_TOURISM_CODES = (5, 10)


@dataclass(frozen=True)
class ExposureVector:
    unit: str
    region: str
    sector: int
    d_youth: float
    d_gap: float
    d_kaitz: float
    d_sectoral: float
    tourism: float = 0.0
    tourism_raw: float = 0.0


def _affected_employees(cells: Sequence[ImputedCell], tiers: TierScheme) -> tuple[float, float]:
    hit = total = 0.0
    for ic in cells:
        hit += float(ic.employees_by_tier[list(tiers.affected)].sum())
        total += float(ic.employees_by_tier.sum())
    return hit, total


def youth_incidence(young_cells: Sequence[ImputedCell], tiers: TierScheme) -> float:
    hit, total = _affected_employees(young_cells, tiers)
    if not total > 0:
        raise NoYoungEmployment("unit has no young employees")
    return hit / total


def sectoral_incidence(cells: Sequence[ImputedCell], tiers: TierScheme) -> float:
    hit, total = _affected_employees(cells, tiers)
    if not total > 0:
        raise NoEmployment("unit has no employees")
    return hit / total


def monetary_gap(
    young_cells: Sequence[ImputedCell],
    total_wage_bill: float,
    smi_post: float,
    tiers: TierScheme,
) -> float:
    """``sum_k max(0, smi_post - w_k) * E_young_k / W_total`` over affected
    brackets; wages, ``smi_post`` and ``total_wage_bill`` in constant euros."""
    if not total_wage_bill > 0:
        raise ZeroWageBill("unit total wage bill must be positive")
    gap = 0.0
    for ic in young_cells:
        mask = np.isin(ic.tier_index, tiers.affected)
        shortfall = np.maximum(0.0, smi_post - ic.real_support[mask])
        gap += float(shortfall @ ic.employees_by_bracket[mask])
    return gap / total_wage_bill


def kaitz_index(mean_wage: float, smi_pre: float) -> float:
    if not mean_wage > 0:
        raise NonpositiveMeanWage(f"unit mean wage must be positive, got {mean_wage}")
    return smi_pre / mean_wage


def tourism_intensity(
    raw_rows: Iterable[RawCellRow],
    mapping: DimensionMapping,
    reform_year: int = 2019,
    tourism_codes: Sequence[int] = DEFAULT_TOURISM_CODES,
    regions: Sequence[str] | None = None,
    sector_dummy: bool = True,
    region_map: Mapping[str, str] | None = None,
) -> pd.DataFrame:
    """Regional pre-reform employment share in tourism-characteristic codes.

    Returns one row per unit with ``tourism_raw`` (the share, optionally
    interacted with a dummy for the sectors the tourism codes map to) and
    ``tourism`` (standardised to mean 0, variance 1 across units; all zeros
    when the raw values do not vary).
    """
    codes = {int(c) for c in tourism_codes}
    tour = defaultdict(float)
    total = defaultdict(float)
    for r in raw_rows:
        if r.year >= reform_year:
            continue
        region = region_map.get(r.region, r.region) if region_map else r.region
        e = float(r.employees)
        total[region] += e
        if int(r.sector_code) in codes:
            tour[region] += e
    if not total:
        raise MissingPrePeriod(f"no employment rows before {reform_year}")
    regs = sorted(regions) if regions is not None else sorted(total)
    missing = [g for g in regs if g not in total]
    if missing:
        raise MissingPrePeriod(f"no pre-{reform_year} employment for regions {missing}")
    tour_sectors = {mapping.sector(c) for c in codes if c in mapping.sector_map}
    rows = []
    for g in regs:
        share = tour[g] / total[g] if total[g] > 0 else 0.0
        for s in SECTORS:
            raw = share * (1.0 if s in tour_sectors else 0.0) if sector_dummy else share
            rows.append({"unit": unit_id(g, s), "region": g, "sector": s, "share": share, "tourism_raw": raw})
    df = pd.DataFrame(rows)
    df["tourism"] = standardize(df["tourism_raw"].to_numpy())
    return df


def standardize(x) -> np.ndarray:
    """Mean 0, population variance 1; constant input maps to zeros."""
    x = np.asarray(x, dtype=float)
    sd = x.std()
    if not sd > 0 or sd < 1e-14 * max(1.0, np.abs(x).max()):
        return np.zeros_like(x)
    z = (x - x.mean()) / sd
    # one more pass removes the rounding left by the first
    return (z - z.mean()) / z.std()


def build_exposures(
    imputed: Iterable[ImputedCell],
    smi_pre: float,
    smi_post: float,
    tiers: TierScheme,
    deflator: Deflator | None = None,
    reference_year: int = 2018,
    tourism: pd.DataFrame | None = None,
) -> list[ExposureVector]:
    """Four bite measures for every region x sector unit.

    ``smi_pre``/``smi_post`` are in constant euros. Only cells of
    ``reference_year`` are used.
    """
    by_unit = defaultdict(list)
    for ic in imputed:
        if ic.cell.year == reference_year:
            by_unit[(ic.cell.region, ic.cell.sector)].append(ic)
    if not by_unit:
        raise MissingPrePeriod(f"no imputed cells for reference year {reference_year}")
    index = deflator.index(reference_year) if deflator is not None else 1.0
    tour = {}
    if tourism is not None:
        tour = {u: (t, r) for u, t, r in zip(tourism["unit"], tourism["tourism"], tourism["tourism_raw"])}
    out = []
    for (region, sector), cells in sorted(by_unit.items()):
        young = [ic for ic in cells if ic.cell.age_group == "young"]
        emp = sum(ic.cell.employees for ic in cells)
        bill = sum(ic.cell.wage_bill for ic in cells) / index
        if not emp > 0:
            raise NoEmployment(f"unit {unit_id(region, sector)} has no employees in {reference_year}")
        u = unit_id(region, sector)
        t, traw = tour.get(u, (0.0, 0.0))
        out.append(
            ExposureVector(
                unit=u,
                region=region,
                sector=sector,
                d_youth=youth_incidence(young, tiers),
                d_gap=monetary_gap(young, bill, smi_post, tiers),
                d_kaitz=kaitz_index(bill / emp, smi_pre),
                d_sectoral=sectoral_incidence(cells, tiers),
                tourism=float(t),
                tourism_raw=float(traw),
            )
        )
    return out


def exposures_frame(vectors: Iterable[ExposureVector]) -> pd.DataFrame:
    cols = ["unit", "region", "sector", "d_youth", "d_gap", "d_kaitz", "d_sectoral", "tourism", "tourism_raw"]
    return pd.DataFrame([asdict(v) for v in vectors], columns=cols)


def write_exposures(vectors: Iterable[ExposureVector], path, header_comment: str | None = None) -> None:
    df = exposures_frame(vectors)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(df.columns)
        for row in df.itertuples(index=False):
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# Descriptives
# ---------------------------------------------------------------------------


@dataclass
class ExposureDescriptives:
    stats: pd.DataFrame  # rows: statistic, columns: measure
    pearson: pd.DataFrame
    spearman: pd.DataFrame
    undefined_correlations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "stats": {m: {k: clean(v) for k, v in self.stats[m].items()} for m in self.stats.columns},
            "pearson": {a: {b: clean(self.pearson.loc[a, b]) for b in self.pearson.columns} for a in self.pearson.index},
            "spearman": {a: {b: clean(self.spearman.loc[a, b]) for b in self.spearman.columns} for a in self.spearman.index},
            "undefined_correlations": [list(p) for p in self.undefined_correlations],
        }


def describe(x) -> dict:
    """Moments and type-7 (linear between closest ranks) quantiles.

    ``sd`` is the sample standard deviation (n - 1).
    """
    x = np.asarray(x, dtype=float)
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    cv = sd / mean if mean > 0 else float("nan")
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return {
        "mean": mean,
        "median": float(q[2]),
        "sd": sd,
        "cv": cv,
        "min": float(q[0]),
        "p25": float(q[1]),
        "p75": float(q[3]),
        "max": float(q[4]),
        "n": int(x.size),
    }


def exposure_descriptives(vectors: Iterable[ExposureVector], measures: Sequence[str] = MEASURES) -> ExposureDescriptives:
    df = exposures_frame(vectors)
    if len(df) < 2:
        raise InsufficientUnits(f"need at least 2 units, got {len(df)}")
    unknown = [m for m in measures if m not in df.columns]
    if unknown:
        raise ValidationError(f"unknown measures {unknown}")
    stats = pd.DataFrame({m: describe(df[m]) for m in measures})
    X = df[list(measures)].to_numpy(dtype=float)
    constant = [m for m, col in zip(measures, X.T) if np.ptp(col) == 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        pearson = pd.DataFrame(np.corrcoef(X, rowvar=False), index=measures, columns=measures)
        ranks = df[list(measures)].rank(method="average").to_numpy()
        spearman = pd.DataFrame(np.corrcoef(ranks, rowvar=False), index=measures, columns=measures)
    undefined = []
    for i, a in enumerate(measures):
        for b in measures[i:]:
            if a in constant or b in constant:
                pearson.loc[a, b] = pearson.loc[b, a] = np.nan
                spearman.loc[a, b] = spearman.loc[b, a] = np.nan
                undefined.append((a, b))
    for m in measures:
        if m not in constant:
            pearson.loc[m, m] = spearman.loc[m, m] = 1.0
    return ExposureDescriptives(stats, pearson.clip(-1, 1), spearman.clip(-1, 1), undefined)
