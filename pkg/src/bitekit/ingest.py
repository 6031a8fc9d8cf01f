"""Loading, validation, deflation and dimensional reduction of the three
administrative table shapes (income-bracket distributions, withholding
cells, VAT firm rows) plus the CPI series and the code mapping.

Monetary values are parsed as exact decimals, summed exactly, and converted
to binary floating point once per output value. This makes aggregation
independent of row order.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    InvalidDistribution,
    MissingColumn,
    NegativeCount,
    NonMonotoneBrackets,
    UnbalancedPanel,
    UnknownYear,
    UnmappedCode,
    ValidationError,
)

logger = logging.getLogger(__name__)

SECTORS = (1, 2, 3, 4, 5, 6)
SECTOR_NAMES = {
    1: "Agriculture",
    2: "Industry & Energy",
    3: "Construction",
    4: "Trade, Tourism & Transport",
    5: "Advanced Services",
    6: "Social & Public Services",
}
AGE_GROUPS = ("young", "adult", "mature")

MODELO100_COLUMNS = ("region", "year", "bracket_index", "employees", "wage_mass")
MODELO190_COLUMNS = ("region", "sector_code", "age_band", "year", "employees", "wage_bill")
MODELO390_COLUMNS = ("region", "sector_code", "year", "sales", "value_added", "n_firms")
CPI_COLUMNS = ("year", "index")

# Synthetic default, not the official fiscal-code table.
DEFAULT_SECTOR_MAP = {1: 1, 2: 2, 3: 2, 4: 3, 5: 4, 6: 5, 7: 5, 8: 6, 9: 6, 10: 4}
RAW_SECTOR_LABELS = {
    1: "Agriculture, forestry & fishing",
    2: "Manufacturing",
    3: "Energy, water & extractive",
    4: "Construction",
    5: "Trade & hospitality",
    6: "Finance & insurance",
    7: "Professional & real-estate services",
    8: "Public administration, education & health",
    9: "Other services",
    10: "Transport & communications",
}
# Raw age bands as (first age, last age), inclusive.
DEFAULT_AGE_BANDS = {
    1: (16, 19),
    2: (20, 24),
    3: (25, 29),
    4: (30, 34),
    5: (35, 44),
    6: (45, 54),
    7: (55, 65),
}


def collapse_age_bands(bands: Mapping[int, tuple[float, float]], cuts=(30, 45)) -> dict[int, str]:
    """Assign each raw band to young/adult/mature by its midpoint.

    A midpoint falling exactly on a cut goes to the younger group.
    """
    young_cut, mature_cut = cuts
    out = {}
    for code, (lo, hi) in bands.items():
        mid = 0.5 * (lo + hi)
        if mid <= young_cut:
            out[code] = "young"
        elif mid <= mature_cut:
            out[code] = "adult"
        else:
            out[code] = "mature"
    return out


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BracketScheme:
    lower_edges: np.ndarray
    width: float
    count: int

    def __post_init__(self):
        edges = np.asarray(self.lower_edges, dtype=float)
        object.__setattr__(self, "lower_edges", edges)
        if edges.ndim != 1 or edges.size == 0:
            raise NonMonotoneBrackets("bracket scheme needs at least one edge")
        if self.count != edges.size:
            raise NonMonotoneBrackets(f"count={self.count} but {edges.size} edges given")
        if not self.width > 0:
            raise NonMonotoneBrackets(f"bracket width must be positive, got {self.width}")
        steps = np.diff(edges)
        if np.any(steps <= 0):
            raise NonMonotoneBrackets("bracket edges must be strictly increasing")
        if not np.allclose(steps, self.width, rtol=0, atol=1e-9 * max(1.0, self.width)):
            raise NonMonotoneBrackets("bracket edges are not uniformly spaced at the declared width")

    @classmethod
    def uniform(cls, count: int = 400, width: float = 200.0, start: float = 0.0) -> "BracketScheme":
        return cls(start + width * np.arange(count, dtype=float), float(width), int(count))

    @property
    def upper_edges(self) -> np.ndarray:
        return self.lower_edges + self.width

    @property
    def midpoints(self) -> np.ndarray:
        return self.lower_edges + 0.5 * self.width

    @property
    def top(self) -> float:
        return float(self.lower_edges[-1] + self.width)


@dataclass(frozen=True, eq=False)
class GroupedDistribution:
    scheme: BracketScheme
    employees: np.ndarray
    wage_mass: np.ndarray
    region: str
    year: int

    def __post_init__(self):
        e = np.asarray(self.employees, dtype=float)
        m = np.asarray(self.wage_mass, dtype=float)
        object.__setattr__(self, "employees", e)
        object.__setattr__(self, "wage_mass", m)
        where = f"distribution ({self.region}, {self.year})"
        if e.shape != (self.scheme.count,) or m.shape != (self.scheme.count,):
            raise InvalidDistribution(f"{where}: arrays must have length {self.scheme.count}")
        if np.any(e < 0) or np.any(m < 0):
            raise NegativeCount(f"{where}: negative employees or wage mass")
        if np.any((e == 0) & (m != 0)):
            k = int(np.flatnonzero((e == 0) & (m != 0))[0])
            raise InvalidDistribution(f"{where}: bracket {k} has wage mass but no employees")
        pos = e > 0
        means = m[pos] / e[pos]
        lo = self.scheme.lower_edges[pos]
        hi = lo + self.scheme.width
        slack = 1e-9 * np.maximum(1.0, hi)
        bad = (means < lo - slack) | (means > hi + slack)
        if np.any(bad):
            k = int(np.flatnonzero(pos)[np.flatnonzero(bad)[0]])
            raise InvalidDistribution(
                f"{where}: implied mean of bracket {k} lies outside "
                f"[{self.scheme.lower_edges[k]}, {self.scheme.upper_edges[k]}]"
            )

    @property
    def total_employees(self) -> float:
        return float(self.employees.sum())

    @property
    def total_wage_mass(self) -> float:
        return float(self.wage_mass.sum())

    def implied_means(self) -> np.ndarray:
        """Per-bracket mean wage; NaN for empty brackets."""
        out = np.full(self.scheme.count, np.nan)
        pos = self.employees > 0
        out[pos] = self.wage_mass[pos] / self.employees[pos]
        return out


@dataclass(frozen=True)
class CellAggregate:
    region: str
    sector: int
    age_group: str
    year: int
    employees: float
    wage_bill: float

    @property
    def mean_wage(self) -> float:
        return self.wage_bill / self.employees if self.employees > 0 else float("nan")

    @property
    def key(self) -> tuple:
        return (self.region, self.sector, self.age_group, self.year)

    @property
    def unit(self) -> str:
        return unit_id(self.region, self.sector)


@dataclass(frozen=True)
class RawCellRow:
    """One Modelo-190 row before sector/age reduction."""

    region: str
    sector_code: int
    age_band: int
    year: int
    employees: Decimal | float
    wage_bill: Decimal | float


@dataclass(frozen=True)
class FirmOutcomeRow:
    region: str
    sector: int
    year: int
    sales: float
    value_added: float
    n_firms: int

    @property
    def unit(self) -> str:
        return unit_id(self.region, self.sector)


@dataclass(frozen=True)
class Deflator:
    base_year: int
    index_by_year: Mapping[int, float]

    def __post_init__(self):
        idx = {int(y): float(v) for y, v in self.index_by_year.items()}
        if any(not v > 0 for v in idx.values()):
            raise ValidationError("price indices must be strictly positive")
        if self.base_year not in idx:
            raise UnknownYear(f"base year {self.base_year} missing from price index")
        if idx[self.base_year] != 1.0:
            raise ValidationError("price index must equal 1 in the base year; use Deflator.rebased")
        object.__setattr__(self, "index_by_year", idx)

    @classmethod
    def rebased(cls, base_year: int, index_by_year: Mapping[int, float]) -> "Deflator":
        idx = {int(y): float(v) for y, v in index_by_year.items()}
        if base_year not in idx:
            raise UnknownYear(f"base year {base_year} missing from price index")
        b = idx[base_year]
        return cls(base_year, {y: (1.0 if y == base_year else v / b) for y, v in idx.items()})

    def index(self, year: int) -> float:
        try:
            return self.index_by_year[int(year)]
        except KeyError:
            raise UnknownYear(f"no price index for year {year}") from None

    def deflate(self, value, year: int):
        return value / self.index(year)

    def inflate(self, value, year: int):
        return value * self.index(year)


def deflate(value, year: int, d: Deflator):
    """Nominal euros of ``year`` to constant base-year euros."""
    return d.deflate(value, year)


@dataclass(frozen=True)
class DimensionMapping:
    sector_map: Mapping[int, int]
    age_map: Mapping[int, str]

    def __post_init__(self):
        sm = {int(k): int(v) for k, v in self.sector_map.items()}
        am = {int(k): str(v).lower() for k, v in self.age_map.items()}
        if set(sm.values()) != set(SECTORS):
            raise ValidationError(f"sector map must be onto sectors {SECTORS}, got {sorted(set(sm.values()))}")
        if set(am.values()) != set(AGE_GROUPS):
            raise ValidationError(f"age map must be onto {AGE_GROUPS}, got {sorted(set(am.values()))}")
        object.__setattr__(self, "sector_map", sm)
        object.__setattr__(self, "age_map", am)

    @classmethod
    def default(cls) -> "DimensionMapping":
        return cls(dict(DEFAULT_SECTOR_MAP), collapse_age_bands(DEFAULT_AGE_BANDS))

    def sector(self, code: int, where: str = "") -> int:
        try:
            return self.sector_map[int(code)]
        except KeyError:
            raise UnmappedCode(f"{where}sector code {code} is not in the mapping") from None

    def age_group(self, band: int, where: str = "") -> str:
        try:
            return self.age_map[int(band)]
        except KeyError:
            raise UnmappedCode(f"{where}age band {band} is not in the mapping") from None

    def to_json(self, path) -> None:
        doc = {
            "sector_map": {str(k): v for k, v in sorted(self.sector_map.items())},
            "age_map": {str(k): v for k, v in sorted(self.age_map.items())},
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_mapping(path) -> DimensionMapping:
    try:
        doc = json.loads(Path(path).read_text())
        return DimensionMapping(doc["sector_map"], doc["age_map"])
    except (KeyError, json.JSONDecodeError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed mapping file ({exc})") from None


@dataclass(frozen=True)
class PanelSkeleton:
    years: tuple[int, ...]
    imputation_units: tuple[tuple[str, int, str], ...]
    estimation_units: tuple[str, ...]

    @property
    def n_unit_years(self) -> int:
        return len(self.estimation_units) * len(self.years)


def unit_id(region: str, sector: int) -> str:
    return f"{region}:{int(sector)}"


def split_unit(unit: str) -> tuple[str, int]:
    region, sector = unit.rsplit(":", 1)
    return region, int(sector)


# ---------------------------------------------------------------------------
# CSV plumbing
# ---------------------------------------------------------------------------


def _rows(path, required: Sequence[str]):
    """Yield (line_number, row dict) for a CSV file, skipping '#' comments."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.DictReader(lines)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise MissingColumn(f"{path.name}: missing column(s) {missing} (header: {header})")
        for i, row in enumerate(reader, start=2):
            yield i, row


def _decimal(text, where: str, column: str) -> Decimal:
    try:
        value = Decimal(str(text).strip())
    except (InvalidOperation, AttributeError):
        raise ValidationError(f"{where}: column {column!r} is not a number ({text!r})") from None
    if not value.is_finite():
        raise ValidationError(f"{where}: column {column!r} is not finite ({text!r})")
    return value


def _int(text, where: str, column: str) -> int:
    value = _decimal(text, where, column)
    if value != value.to_integral_value():
        raise ValidationError(f"{where}: column {column!r} must be an integer ({text!r})")
    return int(value)


def _as_decimal(x) -> Decimal:
    if isinstance(x, Decimal):
        return x
    if isinstance(x, (int, np.integer)):
        return Decimal(int(x))
    # repr of a float is what gets written to CSV, so in-memory and
    # round-tripped data aggregate identically
    return Decimal(repr(float(x)))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, Decimal):
        return str(x)
    return repr(float(x))


def _region(raw: str, region_map: Mapping[str, str] | None) -> str:
    raw = raw.strip()
    if region_map:
        return region_map.get(raw, raw)
    return raw


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BracketRow:
    """One Modelo-100 row: a region-year-bracket employment and wage mass."""

    region: str
    year: int
    bracket_index: int
    employees: Decimal | float
    wage_mass: Decimal | float


def load_bracket_rows(path) -> list[BracketRow]:
    name = Path(path).name
    rows = []
    for line, row in _rows(path, MODELO100_COLUMNS):
        where = f"{name} row {line}"
        region = row["region"].strip()
        year = _int(row["year"], where, "year")
        k = _int(row["bracket_index"], where, "bracket_index")
        e = _decimal(row["employees"], where, "employees")
        m = _decimal(row["wage_mass"], where, "wage_mass")
        if e < 0 or m < 0:
            raise NegativeCount(f"{where} ({region}, {year}, bracket {k}): negative employees or wage mass ({e}, {m})")
        rows.append(BracketRow(region=region, year=year, bracket_index=k, employees=e, wage_mass=m))
    return rows


def aggregate_brackets(
    rows: Iterable[BracketRow], scheme: BracketScheme, region_map: Mapping[str, str] | None = None, source: str = ""
) -> list[GroupedDistribution]:
    """One distribution per (region, year); absent brackets are empty.

    ``region_map`` merges source regions (e.g. two small territories
    reported separately) by exact summation.
    """
    seen = set()
    emp = defaultdict(lambda: defaultdict(Decimal))
    mass = defaultdict(lambda: defaultdict(Decimal))
    prefix = f"{source} " if source else ""
    for i, r in enumerate(rows):
        where = f"{prefix}record {i} ({r.region}, {r.year}, bracket {r.bracket_index})"
        k = int(r.bracket_index)
        if k < 0 or k >= scheme.count:
            raise NonMonotoneBrackets(f"{where}: bracket index {k} outside 0..{scheme.count - 1}")
        if (r.region, r.year, k) in seen:
            raise NonMonotoneBrackets(f"{where}: duplicate bracket")
        seen.add((r.region, r.year, k))
        e, m = _as_decimal(r.employees), _as_decimal(r.wage_mass)
        if e < 0 or m < 0:
            raise NegativeCount(f"{where}: negative employees or wage mass ({e}, {m})")
        key = (_region(r.region, region_map), int(r.year))
        emp[key][k] += e
        mass[key][k] += m

    out = []
    for key in sorted(emp):
        e = np.zeros(scheme.count)
        m = np.zeros(scheme.count)
        for k, v in emp[key].items():
            e[k] = float(v)
        for k, v in mass[key].items():
            m[k] = float(v)
        out.append(GroupedDistribution(scheme, e, m, key[0], key[1]))
    return out


def load_grouped_distributions(
    path, scheme: BracketScheme, region_map: Mapping[str, str] | None = None
) -> list[GroupedDistribution]:
    """Read a Modelo-100 style CSV into one distribution per (region, year)."""
    return aggregate_brackets(load_bracket_rows(path), scheme, region_map, Path(path).name)


def load_raw_cells(path) -> list[RawCellRow]:
    name = Path(path).name
    rows = []
    for line, row in _rows(path, MODELO190_COLUMNS):
        where = f"{name} row {line}"
        e = _decimal(row["employees"], where, "employees")
        w = _decimal(row["wage_bill"], where, "wage_bill")
        if e < 0 or w < 0:
            raise NegativeCount(f"{where}: negative employees or wage bill ({e}, {w})")
        rows.append(
            RawCellRow(
                region=row["region"].strip(),
                sector_code=_int(row["sector_code"], where, "sector_code"),
                age_band=_int(row["age_band"], where, "age_band"),
                year=_int(row["year"], where, "year"),
                employees=e,
                wage_bill=w,
            )
        )
    return rows


def reduce_dimensions(
    rows: Iterable[RawCellRow],
    mapping: DimensionMapping,
    region_map: Mapping[str, str] | None = None,
) -> list[CellAggregate]:
    """Collapse raw sector codes and age bands into analytical cells.

    Employees and wage bills are summed exactly; the mean wage is recomputed
    from the sums.
    """
    emp = defaultdict(Decimal)
    bill = defaultdict(Decimal)
    for i, r in enumerate(rows):
        where = f"row {i}: "
        key = (
            _region(r.region, region_map),
            mapping.sector(r.sector_code, where),
            mapping.age_group(r.age_band, where),
            int(r.year),
        )
        emp[key] += _as_decimal(r.employees)
        bill[key] += _as_decimal(r.wage_bill)
    return [CellAggregate(*key, float(emp[key]), float(bill[key])) for key in sorted(emp, key=_cell_sort_key)]


def _cell_sort_key(key):
    region, sector, age, year = key
    return (region, sector, AGE_GROUPS.index(age), year)


def load_cell_aggregates(
    path, mapping: DimensionMapping, region_map: Mapping[str, str] | None = None
) -> list[CellAggregate]:
    return reduce_dimensions(load_raw_cells(path), mapping, region_map)


def load_firm_rows(path) -> list["RawFirmRow"]:
    name = Path(path).name
    rows = []
    for line, row in _rows(path, MODELO390_COLUMNS):
        where = f"{name} row {line}"
        sales = _decimal(row["sales"], where, "sales")
        va = _decimal(row["value_added"], where, "value_added")
        n = _int(row["n_firms"], where, "n_firms")
        if sales < 0 or n < 0:
            raise NegativeCount(f"{where}: negative sales or firm count")
        rows.append(
            RawFirmRow(
                region=row["region"].strip(),
                sector_code=_int(row["sector_code"], where, "sector_code"),
                year=_int(row["year"], where, "year"),
                sales=sales,
                value_added=va,
                n_firms=n,
            )
        )
    return rows


def aggregate_firms(
    rows: Iterable["RawFirmRow"], mapping: DimensionMapping, region_map: Mapping[str, str] | None = None
) -> list[FirmOutcomeRow]:
    sums = defaultdict(lambda: [Decimal(0), Decimal(0), 0])
    for i, r in enumerate(rows):
        sector = mapping.sector(r.sector_code, f"firm record {i}: ")
        if _as_decimal(r.sales) < 0 or int(r.n_firms) < 0:
            raise NegativeCount(f"firm record {i}: negative sales or firm count")
        acc = sums[(_region(r.region, region_map), sector, int(r.year))]
        acc[0] += _as_decimal(r.sales)
        acc[1] += _as_decimal(r.value_added)
        acc[2] += int(r.n_firms)
    return [FirmOutcomeRow(k[0], k[1], k[2], float(v[0]), float(v[1]), v[2]) for k, v in sorted(sums.items())]


def load_firm_outcomes(
    path, mapping: DimensionMapping, region_map: Mapping[str, str] | None = None
) -> list[FirmOutcomeRow]:
    return aggregate_firms(load_firm_rows(path), mapping, region_map)


def load_deflator(path, base_year: int = 2019) -> Deflator:
    """Read ``year,index`` and rebase so that ``base_year`` has index 1."""
    name = Path(path).name
    idx = {}
    for line, row in _rows(path, CPI_COLUMNS):
        where = f"{name} row {line}"
        year = _int(row["year"], where, "year")
        if year in idx:
            raise ValidationError(f"{where}: duplicate year {year}")
        value = _decimal(row["index"], where, "index")
        if value <= 0:
            raise ValidationError(f"{where}: price index must be positive")
        idx[year] = value
    if base_year not in idx:
        raise UnknownYear(f"{name}: base year {base_year} missing")
    base = idx[base_year]
    if base != 1:
        logger.info("rebasing CPI from %s to base year %d", base, base_year)
    return Deflator(base_year, {y: float(v / base) for y, v in idx.items()})


def validate_balanced_panel(
    cells: Iterable[CellAggregate],
    years: Iterable[int],
    regions: Iterable[str] | None = None,
) -> PanelSkeleton:
    """Check that every (region, sector, age) cell is present in every year.

    Expected units are ``regions`` (or the regions observed) crossed with the
    six sectors and three age groups.
    """
    years = tuple(sorted(set(int(y) for y in years)))
    present = {c.key for c in cells}
    regs = sorted(set(regions) if regions is not None else {k[0] for k in present})
    if not years:
        raise UnbalancedPanel("empty year range")
    units = [(r, s, a) for r in regs for s in SECTORS for a in AGE_GROUPS]
    if not units:
        raise UnbalancedPanel("no cells supplied and no regions declared", missing=[])
    missing = [(r, s, a, y) for (r, s, a) in units for y in years if (r, s, a, y) not in present]
    if missing:
        head = ", ".join(str(m) for m in missing[:5])
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        raise UnbalancedPanel(f"{len(missing)} missing cell-years: {head}{more}", missing=missing)
    est_units = tuple(unit_id(r, s) for r in regs for s in SECTORS)
    return PanelSkeleton(years, tuple(units), est_units)


# ---------------------------------------------------------------------------
# Writers (used by the synthetic generator; inverse of the loaders)
# ---------------------------------------------------------------------------


def write_bracket_rows(rows: Iterable[BracketRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MODELO100_COLUMNS)
        for r in rows:
            w.writerow([r.region, r.year, r.bracket_index, _fmt(r.employees), _fmt(r.wage_mass)])


def bracket_rows(dists: Iterable[GroupedDistribution], skip_empty: bool = True) -> list[BracketRow]:
    out = []
    for g in dists:
        for k in range(g.scheme.count):
            if skip_empty and g.employees[k] == 0:
                continue
            out.append(BracketRow(g.region, g.year, k, float(g.employees[k]), float(g.wage_mass[k])))
    return out


def write_modelo100(dists: Iterable[GroupedDistribution], path, skip_empty: bool = True) -> None:
    write_bracket_rows(bracket_rows(dists, skip_empty), path)


def write_modelo190(rows: Iterable[RawCellRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MODELO190_COLUMNS)
        for r in rows:
            w.writerow([r.region, r.sector_code, r.age_band, r.year, _fmt(r.employees), _fmt(r.wage_bill)])


@dataclass(frozen=True)
class RawFirmRow:
    region: str
    sector_code: int
    year: int
    sales: float
    value_added: float
    n_firms: int


def write_modelo390(rows: Iterable[RawFirmRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MODELO390_COLUMNS)
        for r in rows:
            w.writerow([r.region, r.sector_code, r.year, _fmt(r.sales), _fmt(r.value_added), int(r.n_firms)])


def write_cpi(d: Deflator, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CPI_COLUMNS)
        for y in sorted(d.index_by_year):
            w.writerow([y, _fmt(d.index_by_year[y])])
