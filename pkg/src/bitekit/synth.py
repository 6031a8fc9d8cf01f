"""Census-shaped synthetic data with planted ground truth, and Monte Carlo
experiments built on it.

Wages in every raw cell (region x raw sector code x age band x year) follow a
log-normal law truncated to the bracket grid. Bracket employment and wage
mass are exact integrals of that law, so cell totals and regional
distributions are consistent by construction.

Young employment per region x sector unit follows

    ln Y_it = a_i + l_t + slope*D_i*(t - ref) + beta*D_i*1{t >= post}
              + delta*Tour_i*1{t = 2020} + e_it,

where ``D_i`` is the exposure measured by the pipeline on the generated
reference-year slice, ``Tour_i`` the standardised tourism intensity and
``e_it`` iid normal noise (zero in the reference year, which anchors each
unit's level).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from . import fe
from .bite import MEASURES, ExposureVector, exposures_frame
from .errors import InvalidSpec
from .ingest import (
    AGE_GROUPS,
    SECTORS,
    BracketRow,
    BracketScheme,
    Deflator,
    DimensionMapping,
    RawCellRow,
    RawFirmRow,
    aggregate_brackets,
    aggregate_firms,
    reduce_dimensions,
    unit_id,
    write_bracket_rows,
    write_cpi,
    write_modelo190,
    write_modelo390,
)
from .pipeline import PolicyParameters, compute_exposures, outcome_panel, tourism_table

log = logging.getLogger(__name__)

# Consumer price index, 2019 = 1.
DEFAULT_CPI = {
    2009: 0.876, 2010: 0.893, 2011: 0.920, 2012: 0.942, 2013: 0.955,
    2014: 0.953, 2015: 0.948, 2016: 0.946, 2017: 0.965, 2018: 0.981,
    2019: 1.0, 2020: 0.997, 2021: 1.027, 2022: 1.113, 2023: 1.151,
}
# Annual minimum wage (14 payments) in constant 2019 euros.
DEFAULT_REAL_SMI = {
    2009: 9894.0, 2010: 9851.0, 2011: 9676.0, 2012: 9442.0, 2013: 9372.0,
    2014: 9372.0, 2015: 9459.0, 2016: 9575.0, 2017: 10141.0, 2018: 10375.0,
    2019: 12600.0, 2020: 13340.0, 2021: 14073.0, 2022: 13462.0, 2023: 14078.0,
}
# National mean annual wage in constant 2019 euros.
DEFAULT_REAL_MEAN_WAGE = {
    2009: 21748.0, 2010: 21374.0, 2011: 20717.0, 2012: 19679.0, 2013: 19313.0,
    2014: 19231.0, 2015: 19552.0, 2016: 19798.0, 2017: 19762.0, 2018: 20090.0,
    2019: 20711.0, 2020: 20756.0, 2021: 22597.0, 2022: 22058.0, 2023: 22483.0,
}
# Common year effects in log young employment.
DEFAULT_YEAR_EFFECTS = {
    2009: 0.25, 2010: 0.15, 2011: 0.05, 2012: -0.10, 2013: -0.18,
    2014: -0.15, 2015: -0.10, 2016: -0.06, 2017: -0.03, 2018: 0.0,
    2019: 0.03, 2020: -0.12, 2021: -0.02, 2022: 0.04, 2023: 0.07,
}

REGION_CODES = (
    "AND", "ARA", "AST", "BAL", "CNT", "CYL", "CLM", "CAT",
    "VAL", "EXT", "GAL", "MAD", "MUR", "RIO", "CEM",
)
SPLIT_NAMES = {"CEM": ("CEU", "MEL")}

# Mean-wage factors relative to the national mean.
DEFAULT_SECTOR_SHIFTS = {1: 0.384, 2: 1.238, 3: 0.93, 4: 0.797, 5: 1.118, 6: 1.195}
DEFAULT_AGE_SHIFTS = {"young": 0.4498, "adult": 0.96, "mature": 1.23}
# Within-young gradient over the three young bands.
YOUNG_BAND_GRADIENT = {1: 0.55, 2: 0.85, 3: 1.2}

# Baseline employment shares by raw sector code and by age band.
CODE_WEIGHTS = {1: 0.05, 2: 0.12, 3: 0.02, 4: 0.07, 5: 0.24, 6: 0.08, 7: 0.10, 8: 0.13, 9: 0.13, 10: 0.06}
AGE_BAND_WEIGHTS = {1: 0.02, 2: 0.06, 3: 0.08, 4: 0.12, 5: 0.27, 6: 0.27, 7: 0.18}
TOURISM_CODES = (5, 10)

FIRM_SIZE = 12.0
SALES_PER_WORKER = 60000.0
VALUE_ADDED_SHARE = 0.35
TAIL_CUTOFF = 1e-15


@dataclass(frozen=True)
class DgpSpec:
    seed: int = 20190
    regions: int = 15
    first_year: int = 2009
    last_year: int = 2023
    reference_year: int = 2018
    post_year: int = 2019
    sigma: float = 0.6
    sigma_spread: float = 0.05
    young_sigma: float = 1.15
    young_sector_elasticity: float = 0.3682
    region_wage_sd: float = 0.10
    cell_wage_sd: float = 0.05
    age_mix_sd: float = 0.3
    sector_shifts: Mapping = field(default_factory=lambda: dict(DEFAULT_SECTOR_SHIFTS))
    age_shifts: Mapping = field(default_factory=lambda: dict(DEFAULT_AGE_SHIFTS))
    young_band_gradient: Mapping = field(default_factory=lambda: dict(YOUNG_BAND_GRADIENT))
    tourism_sd: float = 0.25
    planted_beta: float = 0.0
    planted_delta_2020: float = 0.0
    pretrend_slope: float = 0.0
    noise_sd: float = 0.0
    treatment: str = "d_youth"
    firm_beta: float = 0.0
    sales_beta: float = 0.0
    firm_noise_sd: float = 0.02
    sales_noise_sd: float = 0.02
    split_region: bool = False
    cpi: Mapping = field(default_factory=lambda: dict(DEFAULT_CPI))
    real_smi: Mapping = field(default_factory=lambda: dict(DEFAULT_REAL_SMI))
    real_mean_wage: Mapping = field(default_factory=lambda: dict(DEFAULT_REAL_MEAN_WAGE))
    year_effects: Mapping = field(default_factory=lambda: dict(DEFAULT_YEAR_EFFECTS))

    def __post_init__(self):
        for name in ("cpi", "real_smi", "real_mean_wage", "year_effects"):
            object.__setattr__(self, name, {int(k): float(v) for k, v in dict(getattr(self, name)).items()})
        object.__setattr__(self, "sector_shifts", {int(k): float(v) for k, v in dict(self.sector_shifts).items()})
        object.__setattr__(self, "age_shifts", {str(k): float(v) for k, v in dict(self.age_shifts).items()})
        object.__setattr__(self, "young_band_gradient", {int(k): float(v) for k, v in dict(self.young_band_gradient).items()})
        self.validate()

    def validate(self) -> None:
        if self.regions < 2:
            raise InvalidSpec("need at least 2 regions")
        if not self.sigma > 0 or self.sigma_spread < 0 or self.sigma - self.sigma_spread <= 0:
            raise InvalidSpec("log-wage dispersion must stay positive")
        if not self.young_sigma > 0:
            raise InvalidSpec("young_sigma must be positive")
        if not self.young_sector_elasticity >= 0:
            raise InvalidSpec("young_sector_elasticity must be nonnegative")
        years = self.years
        pre = [y for y in years if y < self.post_year]
        post = [y for y in years if y >= self.post_year]
        if len(pre) < 3 or len(post) < 2:
            raise InvalidSpec("years must span at least 3 pre and 2 post periods")
        if not (self.reference_year in years and self.reference_year < self.post_year):
            raise InvalidSpec("reference year must be a pre-period year")
        for name in ("cpi", "real_smi", "real_mean_wage", "year_effects"):
            missing = [y for y in years if y not in getattr(self, name)]
            if missing:
                raise InvalidSpec(f"{name} series lacks years {missing}")
        if self.cpi.get(2019, self.cpi.get(self.post_year)) is None:
            raise InvalidSpec("cpi series needs a base year")
        if set(self.sector_shifts) != set(SECTORS) or any(v <= 0 for v in self.sector_shifts.values()):
            raise InvalidSpec(f"sector_shifts must give a positive factor for each of {SECTORS}")
        if set(self.age_shifts) != set(AGE_GROUPS) or any(v <= 0 for v in self.age_shifts.values()):
            raise InvalidSpec(f"age_shifts must give a positive factor for each of {AGE_GROUPS}")
        if any(not v > 0 for v in self.young_band_gradient.values()):
            raise InvalidSpec("young_band_gradient factors must be positive")
        for name in ("noise_sd", "firm_noise_sd", "sales_noise_sd", "region_wage_sd", "cell_wage_sd", "age_mix_sd", "tourism_sd"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidSpec(f"{name} must be finite and nonnegative")
        if self.treatment not in MEASURES:
            raise InvalidSpec(f"treatment must be one of {MEASURES}")

    @property
    def years(self) -> list[int]:
        return list(range(int(self.first_year), int(self.last_year) + 1))

    @property
    def base_year(self) -> int:
        return 2019 if 2019 in self.cpi else self.post_year

    def region_names(self) -> list[str]:
        if self.regions == len(REGION_CODES):
            return list(REGION_CODES)
        return [f"R{i + 1:02d}" for i in range(self.regions)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("cpi", "real_smi", "real_mean_wage", "year_effects", "sector_shifts", "young_band_gradient"):
            d[name] = {str(k): v for k, v in sorted(d[name].items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidSpec(f"unknown synthetic-data fields {unknown}")
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# Wage law
# ---------------------------------------------------------------------------


def _diff_cdf(z_lo: np.ndarray, z_hi: np.ndarray) -> np.ndarray:
    """Phi(z_hi) - Phi(z_lo) without cancellation in the upper tail."""
    upper = z_lo > 0
    return np.where(upper, special.ndtr(-z_lo) - special.ndtr(-z_hi), special.ndtr(z_hi) - special.ndtr(z_lo))


def bracket_integrals(mu, sigma, edges) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and conditional means of log-normal laws over the
    brackets ``[edges[k], edges[k+1])``, truncated to the grid.

    ``mu``, ``sigma``: arrays of shape (n,); ``edges``: (K+1,). Returns
    (n, K) arrays; empty brackets get probability 0 and mean 0.
    """
    mu = np.asarray(mu, dtype=float)[:, None]
    sigma = np.asarray(sigma, dtype=float)[:, None]
    edges = np.asarray(edges, dtype=float)
    with np.errstate(divide="ignore"):
        le = np.log(edges)[None, :]
    z = (le - mu) / sigma
    prob = _diff_cdf(z[:, :-1], z[:, 1:])
    part = _diff_cdf(z[:, :-1] - sigma, z[:, 1:] - sigma)
    prob = np.where(prob > TAIL_CUTOFF * prob.max(axis=1, keepdims=True), prob, 0.0)
    total = prob.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise InvalidSpec("wage law puts no mass on the bracket grid")
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.exp(mu + sigma**2 / 2) * part / prob
    lo, hi = edges[None, :-1], edges[None, 1:]
    mean = np.where(prob > 0, np.clip(np.nan_to_num(mean, nan=0.0), lo, hi), 0.0)
    # the upper edge belongs to the next bracket
    mean = np.where((prob > 0) & (mean >= hi), np.nextafter(hi, lo), mean)
    return prob / total, mean


def truncated_mean(mu, sigma, top: float) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    z = (math.log(top) - mu) / sigma
    # log scale keeps laws far above the grid top finite
    m = np.exp(mu + sigma**2 / 2 + special.log_ndtr(z - sigma) - special.log_ndtr(z))
    return np.minimum(m, top)


# ---------------------------------------------------------------------------
# Census
# ---------------------------------------------------------------------------


@dataclass
class Structure:
    """Time-invariant draws: region sizes, wage factors and dispersion."""

    regions: list
    raw: pd.DataFrame  # one row per (region, code, band): base employment and wage factor, sigma
    region_sigma: dict


@dataclass
class SyntheticCensus:
    spec: DgpSpec
    bracket_rows: list
    raw_cells: list
    firm_rows: list
    deflator: Deflator
    mapping: DimensionMapping
    policy: PolicyParameters
    region_map: dict | None
    exposures: list
    log_employment: pd.DataFrame  # planted ln Y_it, unit x year
    national_mean_wage: dict
    scheme: BracketScheme = field(default_factory=BracketScheme.uniform)

    def distributions(self):
        return aggregate_brackets(self.bracket_rows, self.scheme, self.region_map)

    def cells(self):
        return reduce_dimensions(self.raw_cells, self.mapping, self.region_map)

    def firms(self):
        return aggregate_firms(self.firm_rows, self.mapping, self.region_map)

    def exposure_frame(self) -> pd.DataFrame:
        return exposures_frame(self.exposures)

    def panel(self, outcome: str = "employment") -> pd.DataFrame:
        return outcome_panel(outcome, cells=self.cells(), firms=self.firms(), deflator=self.deflator)

    def ground_truth(self) -> dict:
        ex = self.exposure_frame()
        return {
            "spec": self.spec.to_dict(),
            "treatment": self.spec.treatment,
            "planted": {
                "beta": self.spec.planted_beta,
                "delta_2020": self.spec.planted_delta_2020,
                "pretrend_slope": self.spec.pretrend_slope,
                "noise_sd": self.spec.noise_sd,
                "firm_beta": self.spec.firm_beta,
                "sales_beta": self.spec.sales_beta,
            },
            "exposures": {
                r.unit: {m: float(getattr(r, m)) for m in (*MEASURES, "tourism", "tourism_raw")}
                for r in ex.itertuples(index=False)
            },
            "national_mean_wage": {str(y): v for y, v in sorted(self.national_mean_wage.items())},
        }

    def config(self, data_dir: str = ".") -> dict:
        """Pipeline configuration pointing at files written by ``write``."""
        spec = self.spec
        d = Path(data_dir)
        return {
            "inputs": {
                "modelo100": str(d / "modelo100.csv"),
                "modelo190": str(d / "modelo190.csv"),
                "modelo390": str(d / "modelo390.csv"),
                "cpi": str(d / "cpi.csv"),
                "mapping": str(d / "mapping.json"),
            },
            "region_map": self.region_map or {},
            "years": [spec.first_year, spec.last_year],
            "base_year": spec.base_year,
            "reference_year": spec.reference_year,
            "post_year": spec.post_year,
            "smi": {str(y): v for y, v in sorted(self.policy.smi_nominal.items())},
            "tourism_codes": list(TOURISM_CODES),
            "seed": spec.seed,
        }

    def write(self, out_dir, config_name: str = "config.json") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_bracket_rows(self.bracket_rows, out / "modelo100.csv")
        write_modelo190(self.raw_cells, out / "modelo190.csv")
        write_modelo390(self.firm_rows, out / "modelo390.csv")
        write_cpi(self.deflator, out / "cpi.csv")
        self.mapping.to_json(out / "mapping.json")
        (out / "ground_truth.json").write_text(
            json.dumps(self.ground_truth(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        cfg = self.config(".")
        (out / config_name).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out / config_name


def _structure(spec: DgpSpec, rng: np.random.Generator, mapping: DimensionMapping) -> Structure:
    regions = spec.region_names()
    n = len(regions)
    size = np.exp(rng.normal(math.log(8e5), 0.8, n))
    region_factor = np.exp(rng.normal(0.0, spec.region_wage_sd, n))
    region_sigma = spec.sigma + rng.uniform(-spec.sigma_spread, spec.sigma_spread, n)
    tourism_boost = np.exp(rng.normal(0.0, spec.tourism_sd, n))
    codes = sorted(CODE_WEIGHTS)
    bands = sorted(AGE_BAND_WEIGHTS)
    young_bands = [b for b in bands if mapping.age_group(b) == "young"]
    grad_norm = sum(AGE_BAND_WEIGHTS[b] * spec.young_band_gradient.get(b, 1.0) for b in young_bands) / sum(
        AGE_BAND_WEIGHTS[b] for b in young_bands
    )
    rows = []
    for i, r in enumerate(regions):
        w = np.array([CODE_WEIGHTS[c] for c in codes]) * np.exp(rng.normal(0.0, 0.25, len(codes)))
        w = w * np.array([tourism_boost[i] if c in TOURISM_CODES else 1.0 for c in codes])
        w = w / w.sum()
        cell_noise = np.exp(rng.normal(0.0, spec.cell_wage_sd, len(codes)))
        age_mix = np.exp(rng.normal(0.0, spec.age_mix_sd, (len(codes), len(AGE_GROUPS))))
        for j, c in enumerate(codes):
            s = mapping.sector(c)
            for b in bands:
                grp = mapping.age_group(b)
                age_f = spec.age_shifts[grp]
                sector_f = spec.sector_shifts[s]
                if grp == "young":
                    age_f *= spec.young_band_gradient.get(b, 1.0) / grad_norm
                    sector_f **= spec.young_sector_elasticity
                sig = region_sigma[i] * (spec.young_sigma if grp == "young" else 1.0)
                rows.append(
                    (r, c, s, b, grp, size[i] * w[j] * AGE_BAND_WEIGHTS[b] * age_mix[j, AGE_GROUPS.index(grp)],
                     region_factor[i] * sector_f * cell_noise[j] * age_f, sig)
                )
    raw = pd.DataFrame(rows, columns=["region", "code", "sector", "band", "age_group", "employment", "wage_factor", "sigma"])
    return Structure(regions, raw, dict(zip(regions, region_sigma)))


def _calibrate_scale(emp, factor, sigma, target_real_mean, index, top) -> float:
    """Common wage scale giving the target national real mean wage."""
    emp = np.asarray(emp, dtype=float)
    tot = emp.sum()

    def gap(log_scale):
        nominal_mean = np.exp(log_scale) * factor * index
        mu = np.log(nominal_mean) - sigma**2 / 2
        m = truncated_mean(mu, sigma, top)
        return float(emp @ m / tot / index) - target_real_mean

    lo, hi = math.log(target_real_mean) - 3.0, math.log(target_real_mean) + 3.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise InvalidSpec(f"cannot reach mean wage {target_real_mean} below the grid top {top}")
    return math.exp(optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200))


def _year_slice(spec, struct, year, emp, deflator, scheme, split):
    """Bracket rows and raw cell rows for one year given cell employment."""
    raw = struct.raw
    index = deflator.index(year)
    factor = raw["wage_factor"].to_numpy()
    sigma = raw["sigma"].to_numpy()
    scale = _calibrate_scale(emp, factor, sigma, spec.real_mean_wage[year], index, scheme.top)
    mu = np.log(scale * factor * index) - sigma**2 / 2
    edges = np.append(scheme.lower_edges, scheme.top)
    prob, mean = bracket_integrals(mu, sigma, edges)
    e_k = emp[:, None] * prob
    m_k = e_k * mean
    bills = m_k.sum(axis=1)
    cells = [
        RawCellRow(r, int(c), int(b), year, float(e), float(w))
        for r, c, b, e, w in zip(raw["region"], raw["code"], raw["band"], emp, bills)
    ]
    brackets = []
    for r in struct.regions:
        mask = (raw["region"] == r).to_numpy()
        e_r = e_k[mask].sum(axis=0)
        m_r = m_k[mask].sum(axis=0)
        parts = [(r, 1.0)]
        if split and r in split:
            a, b = split[r]
            parts = [(a, 0.55), (b, 0.45)]
        for name, share in parts:
            for k in np.flatnonzero(e_r > 0):
                brackets.append(BracketRow(name, year, int(k), float(e_r[k] * share), float(m_r[k] * share)))
    return brackets, cells


def _split_map(spec: DgpSpec) -> dict | None:
    if not spec.split_region:
        return None
    last = spec.region_names()[-1]
    a, b = SPLIT_NAMES.get(last, (f"{last}A", f"{last}B"))
    return {last: (a, b)}


def _firm_rows(spec, struct, years, log_firm, log_sales, deflator):
    raw = struct.raw
    tot = raw.groupby(["region", "code"], sort=True)["employment"].sum()
    out = []
    for (r, c), e in tot.items():
        for y in years:
            u = (r, int(c))
            n = int(round(e / FIRM_SIZE * math.exp(log_firm[u][y])))
            real_sales = e * SALES_PER_WORKER * math.exp(log_sales[u][y])
            sales = real_sales * deflator.index(y)
            out.append(RawFirmRow(r, int(c), y, float(sales), float(sales * VALUE_ADDED_SHARE), max(n, 1)))
    return out


def _outcome_path(spec, units, years, treat, tour, eps, slope=None, beta=None, delta=None):
    """Planted log young-employment deviations from the reference year."""
    t = np.asarray(years, dtype=float)[None, :]
    lam = np.array([spec.year_effects[y] - spec.year_effects[spec.reference_year] for y in years])[None, :]
    slope = spec.pretrend_slope if slope is None else slope
    beta = spec.planted_beta if beta is None else beta
    delta = spec.planted_delta_2020 if delta is None else delta
    d = np.asarray(treat, dtype=float)[:, None]
    g = lam + slope * d * (t - spec.reference_year) + beta * d * (t >= spec.post_year)
    if tour is not None and 2020 in years:
        g = g + delta * np.asarray(tour, dtype=float)[:, None] * (t == 2020)
    return g + eps


def _noise(rng, n_units, years, ref, sd):
    eps = rng.normal(0.0, 1.0, (n_units, len(years))) * sd
    eps[:, years.index(ref)] = 0.0
    return eps


def _setup(spec: DgpSpec):
    mapping = DimensionMapping.default()
    deflator = Deflator.rebased(spec.base_year, spec.cpi)
    policy = PolicyParameters(
        {y: spec.real_smi[y] * deflator.index(y) for y in spec.years},
        reference_year=spec.reference_year,
        post_year=spec.post_year,
        tourism_codes=TOURISM_CODES,
    )
    split = _split_map(spec)
    region_map = {n: r for r, names in split.items() for n in names} if split else None
    return mapping, deflator, policy, split, region_map


def _reference_slice(spec, struct, scheme, mapping, deflator, policy, split, region_map, threads=1):
    emp = struct.raw["employment"].to_numpy()
    br, cells = _year_slice(spec, struct, spec.reference_year, emp, deflator, scheme, split)
    dists = aggregate_brackets(br, scheme, region_map)
    agg = reduce_dimensions(cells, mapping, region_map)
    return br, cells, compute_exposures(dists, agg, None, mapping, deflator, policy, region_map, threads)


def reference_exposures(spec: DgpSpec, scheme: BracketScheme | None = None) -> list[ExposureVector]:
    """Exposures of the reference-year slice only (no tourism); equal to the
    ones ``generate_census`` measures, at a fraction of the cost."""
    scheme = scheme or BracketScheme.uniform()
    mapping, deflator, policy, split, region_map = _setup(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    struct = _structure(spec, np.random.default_rng(seeds[0]), mapping)
    return _reference_slice(spec, struct, scheme, mapping, deflator, policy, split, region_map)[2]


def calibrate_youth_incidence(spec: DgpSpec, target_mean: float = 0.794, target_cv: float = 0.12) -> DgpSpec:
    """Adjust the young wage level and the sector elasticity of young wages
    so that the measured youth incidence across units has the requested
    mean and coefficient of variation."""
    base_young = spec.age_shifts["young"]

    def make(x):
        shifts = dict(spec.age_shifts)
        shifts["young"] = base_young * math.exp(x[0])
        return replace(spec, age_shifts=shifts, young_sector_elasticity=math.exp(x[1]))

    def resid(x):
        d = np.array([v.d_youth for v in reference_exposures(make(x))])
        return [d.mean() - target_mean, d.std(ddof=1) / d.mean() - target_cv]

    x0 = [0.0, math.log(max(spec.young_sector_elasticity, 1e-3))]
    sol = optimize.least_squares(resid, x0, bounds=([-2, -4], [2, 1]), xtol=1e-12, ftol=1e-12)
    return make(sol.x)


def generate_census(spec: DgpSpec, scheme: BracketScheme | None = None, threads: int = 1) -> SyntheticCensus:
    """Deterministic synthetic census for ``spec`` (same seed, same bytes)."""
    scheme = scheme or BracketScheme.uniform()
    years = spec.years
    ref = spec.reference_year
    mapping, deflator, policy, split, region_map = _setup(spec)

    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    struct = _structure(spec, np.random.default_rng(seeds[0]), mapping)
    raw = struct.raw
    young = (raw["age_group"] == "young").to_numpy()
    base_emp = raw["employment"].to_numpy()

    # 1. reference-year slice and the exposures measured on it
    br_ref, cells_ref, exposures_ref = _reference_slice(spec, struct, scheme, mapping, deflator, policy, split, region_map, threads)
    ex = exposures_frame(exposures_ref).set_index("unit")
    units = sorted(ex.index)
    treat = ex.loc[units, spec.treatment].to_numpy()

    # 2. young-employment paths; non-young employment follows half the
    # common cycle
    noise_rng = np.random.default_rng(seeds[1])
    eps = _noise(noise_rng, len(units), years, ref, spec.noise_sd)
    g_pre = _outcome_path(spec, units, years, treat, None, eps)
    lam = {y: spec.year_effects[y] - spec.year_effects[ref] for y in years}
    unit_of_row = np.array([unit_id(r, s) for r, s in zip(raw["region"], raw["sector"])])
    pos = {u: i for i, u in enumerate(units)}
    row_unit = np.array([pos[u] for u in unit_of_row])

    def employment(year, g):
        k = years.index(year)
        young_f = np.exp(g[row_unit, k])
        other_f = math.exp(0.5 * lam[year])
        return base_emp * np.where(young, young_f, other_f)

    # 3. tourism intensity from pre-reform employment (all ages)
    pre_rows = []
    for y in years:
        if y < spec.post_year:
            e = employment(y, g_pre)
            pre_rows.extend(RawCellRow(r, int(c), int(b), y, float(v), 0.0) for r, c, b, v in zip(raw["region"], raw["code"], raw["band"], e))
    tour_df = tourism_table(pre_rows, mapping, policy, struct.regions, region_map).set_index("unit")
    tour = tour_df.loc[units, "tourism"].to_numpy()
    g = _outcome_path(spec, units, years, treat, tour, eps)

    exposures = [
        replace(v, tourism=float(tour_df.loc[v.unit, "tourism"]), tourism_raw=float(tour_df.loc[v.unit, "tourism_raw"]))
        for v in exposures_ref
    ]

    # 4. every year's distributions and cells
    bracket_rows, raw_cells = [], []
    national = {}
    for y in years:
        if y == ref:
            br, cl = br_ref, cells_ref
        else:
            br, cl = _year_slice(spec, struct, y, employment(y, g), deflator, scheme, split)
        bracket_rows.extend(br)
        raw_cells.extend(cl)
        e = sum(r.employees for r in br)
        m = sum(r.wage_mass for r in br)
        national[y] = m / e / deflator.index(y)

    # 5. firm rows
    firm_rng = np.random.default_rng(seeds[2])
    ru = sorted({(r, int(c)) for r, c in zip(raw["region"], raw["code"])})
    unit_treat = dict(zip(units, treat))
    log_firm, log_sales = {}, {}
    for r, c in ru:
        d = unit_treat[unit_id(r, mapping.sector(c))]
        ef = firm_rng.normal(0.0, spec.firm_noise_sd, len(years))
        es = firm_rng.normal(0.0, spec.sales_noise_sd, len(years))
        log_firm[(r, c)] = {
            y: 0.3 * lam[y] + spec.firm_beta * d * (y >= spec.post_year) + (0.0 if y == ref else ef[k])
            for k, y in enumerate(years)
        }
        log_sales[(r, c)] = {
            y: 0.5 * lam[y] + spec.sales_beta * d * (y >= spec.post_year) + (0.0 if y == ref else es[k])
            for k, y in enumerate(years)
        }
    firm_rows = _firm_rows(spec, struct, years, log_firm, log_sales, deflator)

    base_log = np.log(
        pd.Series(base_emp[young]).groupby(row_unit[young]).sum().reindex(range(len(units))).to_numpy()
    )
    log_y = pd.DataFrame(base_log[:, None] + g, index=units, columns=years)
    return SyntheticCensus(
        spec=spec,
        bracket_rows=bracket_rows,
        raw_cells=raw_cells,
        firm_rows=firm_rows,
        deflator=deflator,
        mapping=mapping,
        policy=policy,
        region_map=region_map,
        exposures=exposures,
        log_employment=log_y,
        national_mean_wage=national,
        scheme=scheme,
    )


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def true_coefficient(spec: DgpSpec, name: str) -> float:
    """Planted value of a regression coefficient under ``spec``.

    Event coefficients absorb the differential trend, so
    ``beta_k = beta * 1{k >= post} + slope * (k - ref)``; the static
    coefficient is the planted effect itself.
    """
    if name == "beta":
        return spec.planted_beta
    prefix, _, year = name.partition("_")
    if not year.isdigit():
        raise InvalidSpec(f"no planted value for coefficient {name!r}")
    k = int(year)
    if prefix == "beta":
        return spec.planted_beta * (k >= spec.post_year) + spec.pretrend_slope * (k - spec.reference_year)
    if prefix == "delta":
        return spec.planted_delta_2020 if k == 2020 else 0.0
    raise InvalidSpec(f"no planted value for coefficient {name!r}")


@dataclass
class EstimatorWeights:
    """Rows of ``(X'X)^-1 X'`` on the within-transformed design, so that
    every coefficient is an exact linear function of the outcome vector."""

    names: list
    weights: np.ndarray  # k x n, aligned with ``panel``
    panel: pd.DataFrame  # sorted by unit, year

    def row(self, name: str) -> np.ndarray:
        return self.weights[self.names.index(name)]

    def noise_variance(self, reference_year: int) -> np.ndarray:
        """Sampling covariance of the coefficients per unit noise variance
        (noise is zero in the reference year)."""
        keep = (self.panel["year"] != reference_year).to_numpy()
        A = self.weights[:, keep]
        return A @ A.T


def estimator_weights(design: fe.DesignSpec, panel: pd.DataFrame, exposures) -> EstimatorWeights:
    p = fe.sort_panel(panel)
    cols, _ = fe.design_columns(design, p, exposures)
    names = list(cols)
    work = pd.DataFrame(cols)
    work["unit"] = p["unit"].to_numpy()
    work["year"] = p["year"].to_numpy()
    X = fe.within_transform(work, names, "unit", "year")[names].to_numpy()
    return EstimatorWeights(names, np.linalg.solve(X.T @ X, X.T), p)


def noise_for_se(census: SyntheticCensus, design: fe.DesignSpec, coefficient: str, target_se: float) -> float:
    """Noise standard deviation giving ``coefficient`` the exact sampling
    standard deviation ``target_se``."""
    w = estimator_weights(design, census.panel(), census.exposures)
    j = w.names.index(coefficient)
    var = w.noise_variance(census.spec.reference_year)[j, j]
    return float(target_se / math.sqrt(var))


def population_pretrend_f(census: SyntheticCensus, pre_years: Sequence[int], slope: float | None = None, noise_sd: float | None = None) -> float:
    """Noncentrality per restriction, ``delta' V^-1 delta / q``, of the
    joint pre-period test when the differential trend is ``slope``; ``V``
    is the exact sampling covariance of the pre-period coefficients."""
    spec = census.spec
    slope = spec.pretrend_slope if slope is None else slope
    sd = spec.noise_sd if noise_sd is None else noise_sd
    u, V = _pretrend_moments(census, pre_years)
    return float(slope**2 * (u @ np.linalg.solve(V * sd**2, u)) / len(u))


def pretrend_slope_for_f(census: SyntheticCensus, pre_years: Sequence[int], target_f: float, noise_sd: float | None = None) -> float:
    sd = census.spec.noise_sd if noise_sd is None else noise_sd
    u, V = _pretrend_moments(census, pre_years)
    return float(math.sqrt(target_f * len(u) / (u @ np.linalg.solve(V * sd**2, u))))


def _pretrend_moments(census, pre_years):
    spec = census.spec
    design = fe.DesignSpec("event", treatment=spec.treatment, post_year=spec.post_year, reference_year=spec.reference_year)
    w = estimator_weights(design, census.panel(), census.exposures)
    idx = [w.names.index(f"beta_{y}") for y in pre_years]
    if not idx:
        raise InvalidSpec("need at least one pre-period year")
    d = census.exposure_frame().set_index("unit").loc[w.panel["unit"], spec.treatment].to_numpy()
    trend = d * (w.panel["year"].to_numpy() - spec.reference_year)
    u = w.weights[idx] @ trend
    V = w.noise_variance(spec.reference_year)[np.ix_(idx, idx)]
    return u, V


def fragile_positive(slope: float = 0.05, breakdown: float = 0.2, treatment: str = "d_kaitz", seed: int = 20190, alpha: float = 0.05) -> DgpSpec:
    """Spec whose 2019 event coefficient is significantly positive at
    mbar = 0 but whose robust interval reaches zero near ``breakdown``.

    The pre-period path is a linear trend, so the largest pre-period
    coefficient is about ``slope * (ref - first_year)``; noise is set so the
    2019 standard error is a fortieth of that and the planted effect puts
    ``(beta_2019 - z*se) / maxpre`` at ``breakdown``.
    """
    base = DgpSpec(seed=seed, treatment=treatment, pretrend_slope=slope)
    maxpre = slope * (base.reference_year - base.first_year)
    se = maxpre / 40.0
    z = float(stats.norm.ppf(1 - alpha / 2))
    beta = breakdown * maxpre + z * se - slope
    census = generate_census(base)
    design = fe.DesignSpec("event", treatment=treatment)
    sd = noise_for_se(census, design, f"beta_{base.post_year}", se)
    return replace(base, planted_beta=beta, noise_sd=sd)


@dataclass
class MonteCarloResult:
    spec: DgpSpec
    design: fe.DesignSpec
    estimates: pd.DataFrame  # reps x coefficients
    std_errors: pd.DataFrame
    truth: dict
    alpha: float = 0.05
    wald_p: np.ndarray | None = None
    wald_stat: np.ndarray | None = None
    df_resid: int = 0

    @property
    def reps(self) -> int:
        return len(self.estimates)

    def coverage(self, name: str) -> float:
        crit = stats.t.ppf(1 - self.alpha / 2, self.df_resid)
        b, s = self.estimates[name], self.std_errors[name]
        return float(((b - crit * s <= self.truth[name]) & (self.truth[name] <= b + crit * s)).mean())

    def rejection_rate(self, level: float = 0.05) -> float:
        if self.wald_p is None:
            raise InvalidSpec("no pre-trend test was run")
        return float(np.mean(self.wald_p < level))

    def summary(self) -> pd.DataFrame:
        rows = []
        for name in self.estimates.columns:
            b = self.estimates[name]
            rows.append(
                {
                    "name": name,
                    "truth": self.truth[name],
                    "mean": float(b.mean()),
                    "sd": float(b.std(ddof=1)),
                    "mc_se": float(b.std(ddof=1) / math.sqrt(len(b))),
                    "bias": float(b.mean() - self.truth[name]),
                    "mean_se": float(self.std_errors[name].mean()),
                    "coverage": self.coverage(name),
                }
            )
        return pd.DataFrame(rows)


def monte_carlo(
    spec: DgpSpec,
    reps: int,
    design: fe.DesignSpec,
    census: SyntheticCensus | None = None,
    coefficients: Sequence[str] | None = None,
    pre_years: Sequence[int] | None = None,
    alpha: float = 0.05,
    wald_correction: str = "simulated",
    threads: int = 1,
) -> MonteCarloResult:
    """Redraw the outcome noise ``reps`` times on a fixed census.

    Units, exposures and tourism intensity stay those of ``census``; rep
    ``r`` draws its noise from seed ``spec.seed + 1 + r``. When
    ``pre_years`` is given the joint pre-period test is run on every rep.
    """
    if reps < 100:
        raise InvalidSpec(f"need at least 100 replications, got {reps}")
    census = census or generate_census(spec)
    template = census.panel()
    template = fe.sort_panel(template).reset_index(drop=True)
    units = sorted(census.log_employment.index)
    years = spec.years
    ex = census.exposure_frame().set_index("unit").loc[units]
    treat = ex[spec.treatment].to_numpy()
    tour = ex["tourism"].to_numpy()
    # planted paths are zero in the reference year, which pins unit levels
    ref_level = census.log_employment[spec.reference_year].loc[units].to_numpy()
    base = np.repeat(ref_level, len(years))

    null = None

    def one(r: int):
        rng = np.random.default_rng(spec.seed + 1 + r)
        eps = _noise(rng, len(units), years, spec.reference_year, spec.noise_sd)
        y = base + _outcome_path(spec, units, years, treat, tour, eps).reshape(-1)
        f = fe.fit(design, template.assign(outcome=y), census.exposures)
        w = None
        if pre_years is not None:
            w = fe.wald_pretrend_test(f, pre_years, correction=wald_correction, null=null)
        return f, w

    if pre_years is not None and wald_correction == "simulated":
        # the null law depends on the design only, which every rep shares
        first = fe.fit(design, template.assign(outcome=base), census.exposures)
        null = fe.wald_null_distribution(first, pre_years, seed=spec.seed)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, range(reps)))
    else:
        out = [one(r) for r in range(reps)]
    names = list(coefficients) if coefficients is not None else out[0][0].names
    est = pd.DataFrame([[f.estimate(n) for n in names] for f, _ in out], columns=names)
    se = pd.DataFrame([[f.std_error(n) for n in names] for f, _ in out], columns=names)
    wald_p = wald_stat = None
    if pre_years is not None:
        wald_p = np.array([w.p_value for _, w in out])
        wald_stat = np.array([w.statistic for _, w in out])
    return MonteCarloResult(
        spec=spec,
        design=design,
        estimates=est,
        std_errors=se,
        truth={n: true_coefficient(spec, n) for n in names},
        alpha=alpha,
        wald_p=wald_p,
        wald_stat=wald_stat,
        df_resid=out[0][0].df_resid,
    )
