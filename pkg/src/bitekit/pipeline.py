"""Stage composition shared by the command line driver and the synthetic
generator: imputation, exposure construction and outcome panels.

Keeping one code path guarantees that exposures computed while generating
a census equal the ones recomputed later from the written files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .bite import DEFAULT_TOURISM_CODES, ExposureVector, build_exposures, tourism_intensity
from .errors import InvalidConfig, MissingPrePeriod, UnknownYear, ValidationError
from .ingest import (
    CellAggregate,
    Deflator,
    DimensionMapping,
    FirmOutcomeRow,
    GroupedDistribution,
    RawCellRow,
    unit_id,
)
from .tilt import ClosureReport, ImputedCell, TierScheme, impute_cells, validate_closure

OUTCOMES = ("employment", "firms", "sales")


@dataclass(frozen=True)
class PolicyParameters:
    """Minimum-wage schedule (nominal annual euros) and tier definition."""

    smi_nominal: Mapping[int, float]
    reference_year: int = 2018
    post_year: int = 2019
    tier_thresholds: tuple | None = None  # constant euros; default from the SMI
    tourism_codes: tuple = DEFAULT_TOURISM_CODES

    def __post_init__(self):
        smi = {int(y): float(v) for y, v in dict(self.smi_nominal).items()}
        object.__setattr__(self, "smi_nominal", smi)
        for y in (self.reference_year, self.post_year):
            if y not in smi:
                raise InvalidConfig(f"minimum wage missing for year {y}")
        if any(not (v > 0 and math.isfinite(v)) for v in smi.values()):
            raise InvalidConfig("minimum wage values must be positive")

    def real_smi(self, year: int, deflator: Deflator) -> float:
        if year not in self.smi_nominal:
            raise UnknownYear(f"no minimum wage configured for {year}")
        return float(deflator.deflate(self.smi_nominal[year], year))

    def tiers(self, deflator: Deflator) -> TierScheme:
        if self.tier_thresholds is not None:
            return TierScheme(tuple(float(v) for v in self.tier_thresholds))
        return TierScheme.from_smi(
            self.real_smi(self.reference_year, deflator), self.real_smi(self.post_year, deflator)
        )


@dataclass
class ImputationResult:
    imputed: list
    closure: ClosureReport
    tiers: TierScheme


def impute(
    distributions: Iterable[GroupedDistribution],
    cells: Sequence[CellAggregate],
    deflator: Deflator,
    policy: PolicyParameters,
    years: Iterable[int] | None = None,
    threads: int = 1,
    tol: float = 1e-9,
) -> ImputationResult:
    cells = list(cells)
    if years is not None:
        keep = set(int(y) for y in years)
        cells = [c for c in cells if c.year in keep]
    tiers = policy.tiers(deflator)
    imputed = impute_cells(cells, distributions, tiers, deflator, tol=tol, threads=threads)
    return ImputationResult(imputed, validate_closure(imputed, cells), tiers)


def tourism_table(
    raw_rows: Iterable[RawCellRow],
    mapping: DimensionMapping,
    policy: PolicyParameters,
    regions: Sequence[str],
    region_map: Mapping[str, str] | None = None,
) -> pd.DataFrame:
    return tourism_intensity(
        raw_rows,
        mapping,
        reform_year=policy.post_year,
        tourism_codes=policy.tourism_codes,
        regions=regions,
        region_map=region_map,
    )


def exposures_from_imputed(
    imputed: Iterable[ImputedCell],
    deflator: Deflator,
    policy: PolicyParameters,
    tourism: pd.DataFrame | None = None,
) -> list[ExposureVector]:
    tiers = policy.tiers(deflator)
    return build_exposures(
        imputed,
        smi_pre=policy.real_smi(policy.reference_year, deflator),
        smi_post=policy.real_smi(policy.post_year, deflator),
        tiers=tiers,
        deflator=deflator,
        reference_year=policy.reference_year,
        tourism=tourism,
    )


def compute_exposures(
    distributions: Iterable[GroupedDistribution],
    cells: Sequence[CellAggregate],
    raw_rows: Iterable[RawCellRow] | None,
    mapping: DimensionMapping,
    deflator: Deflator,
    policy: PolicyParameters,
    region_map: Mapping[str, str] | None = None,
    threads: int = 1,
) -> list[ExposureVector]:
    """Impute the reference-year cells and build the exposure vectors."""
    ref = [c for c in cells if c.year == policy.reference_year]
    if not ref:
        raise MissingPrePeriod(f"no cells for reference year {policy.reference_year}")
    dists = [g for g in distributions if g.year == policy.reference_year]
    result = impute(dists, ref, deflator, policy, threads=threads)
    regions = sorted({c.region for c in ref})
    tour = tourism_table(raw_rows, mapping, policy, regions, region_map) if raw_rows is not None else None
    return exposures_from_imputed(result.imputed, deflator, policy, tour)


def outcome_panel(
    outcome: str,
    cells: Iterable[CellAggregate] | None = None,
    firms: Iterable[FirmOutcomeRow] | None = None,
    deflator: Deflator | None = None,
    years: Iterable[int] | None = None,
) -> pd.DataFrame:
    """Long panel ``unit, region, sector, year, cluster, outcome`` in logs.

    ``employment`` is young employment per unit, ``firms`` the number of
    firms and ``sales`` real sales (deflated when a deflator is given).
    """
    keep = set(int(y) for y in years) if years is not None else None
    recs = []
    if outcome == "employment":
        if cells is None:
            raise ValidationError("employment outcome needs cell aggregates")
        for c in cells:
            if c.age_group == "young" and (keep is None or c.year in keep):
                recs.append((c.region, c.sector, c.year, c.employees))
    elif outcome in ("firms", "sales"):
        if firms is None:
            raise ValidationError(f"{outcome} outcome needs firm rows")
        for f in firms:
            if keep is not None and f.year not in keep:
                continue
            if outcome == "firms":
                v = float(f.n_firms)
            else:
                v = float(deflator.deflate(f.sales, f.year)) if deflator is not None else float(f.sales)
            recs.append((f.region, f.sector, f.year, v))
    else:
        raise InvalidConfig(f"unknown outcome {outcome!r}; expected one of {OUTCOMES}")
    df = pd.DataFrame(recs, columns=["region", "sector", "year", "level"])
    bad = df[~(df["level"] > 0)]
    if len(bad):
        r = bad.iloc[0]
        raise ValidationError(f"{outcome} is not positive for ({r.region}, {r.sector}, {r.year}); log undefined")
    df["unit"] = [unit_id(r, s) for r, s in zip(df["region"], df["sector"])]
    df["cluster"] = df["region"]
    df["outcome"] = np.log(df["level"].to_numpy(dtype=float))
    df = df.sort_values(["unit", "year"], kind="mergesort").reset_index(drop=True)
    return df[["unit", "region", "sector", "year", "cluster", "outcome"]]
