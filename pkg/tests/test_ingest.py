from __future__ import annotations

import json
import random
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitekit.errors import MissingColumn, NegativeCount, NonMonotoneBrackets, UnbalancedPanel, UnknownYear, UnmappedCode
from bitekit.ingest import (
    AGE_GROUPS,
    SECTORS,
    BracketRow,
    BracketScheme,
    CellAggregate,
    Deflator,
    DimensionMapping,
    RawCellRow,
    aggregate_brackets,
    collapse_age_bands,
    deflate,
    load_cell_aggregates,
    load_deflator,
    load_grouped_distributions,
    load_mapping,
    reduce_dimensions,
    validate_balanced_panel,
    write_bracket_rows,
)

MAPPING = DimensionMapping.default()


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_two_region_file_loads(tmp_path):
    scheme = BracketScheme.uniform(3, 200)
    rows = [
        ("A", 2018, 0, 10, 1000),
        ("A", 2018, 1, 30, 9000),
        ("A", 2018, 2, 60, 30000),
        ("B", 2018, 0, 5, 600),
        ("B", 2018, 2, 15, 7500),
    ]
    p = write_csv(tmp_path / "m100.csv", ["region", "year", "bracket_index", "employees", "wage_mass"], rows)
    dists = load_grouped_distributions(p, scheme)
    assert [(g.region, g.year) for g in dists] == [("A", 2018), ("B", 2018)]
    assert dists[0].total_employees == 100
    assert dists[1].total_employees == 20
    assert dists[1].employees.tolist() == [5, 0, 15]


def test_negative_count_names_row(tmp_path):
    rows = [("A", 2018, 0, 10, 1000), ("A", 2018, 1, -1, 0)]
    p = write_csv(tmp_path / "m100.csv", ["region", "year", "bracket_index", "employees", "wage_mass"], rows)
    with pytest.raises(NegativeCount, match="bracket 1"):
        load_grouped_distributions(p, BracketScheme.uniform(3, 200))


def test_missing_column(tmp_path):
    p = write_csv(tmp_path / "m100.csv", ["region", "year", "employees", "wage_mass"], [("A", 2018, 1, 100)])
    with pytest.raises(MissingColumn, match="bracket_index"):
        load_grouped_distributions(p, BracketScheme.uniform(3, 200))


def test_bracket_index_beyond_scheme_rejected(tmp_path):
    p = write_csv(tmp_path / "m100.csv", ["region", "year", "bracket_index", "employees", "wage_mass"], [("A", 2018, 3, 1, 700)])
    with pytest.raises(NonMonotoneBrackets):
        load_grouped_distributions(p, BracketScheme.uniform(3, 200))


def test_sixteen_regions_full_grid(tmp_path):
    scheme = BracketScheme.uniform()
    rows = []
    for r in range(16):
        for k in range(400):
            rows.append(BracketRow(f"R{r:02d}", 2019, k, 1.0 + r, (1.0 + r) * (200 * k + 100)))
    write_bracket_rows(rows, tmp_path / "m100.csv")
    dists = load_grouped_distributions(tmp_path / "m100.csv", scheme)
    assert len(dists) == 16
    assert sum(int((g.employees > 0).sum()) for g in dists) == 6400


def test_region_map_merges_by_summation():
    scheme = BracketScheme.uniform(3, 200)
    rows = [BracketRow("CEU", 2018, 0, 3, 300), BracketRow("MEL", 2018, 0, 2, 250), BracketRow("MEL", 2018, 1, 1, 300)]
    (g,) = aggregate_brackets(rows, scheme, {"CEU": "CEM", "MEL": "CEM"})
    assert g.region == "CEM"
    assert g.employees.tolist() == [5, 1, 0]
    assert g.wage_mass.tolist() == [550, 300, 0]


def test_duplicate_bracket_rejected():
    rows = [BracketRow("A", 2018, 0, 1, 100), BracketRow("A", 2018, 0, 1, 100)]
    with pytest.raises(NonMonotoneBrackets, match="duplicate"):
        aggregate_brackets(rows, BracketScheme.uniform(3, 200))


def test_scheme_validation():
    with pytest.raises(NonMonotoneBrackets):
        BracketScheme(np.array([0.0, 200.0, 100.0]), 200.0, 3)
    with pytest.raises(NonMonotoneBrackets):
        BracketScheme(np.array([0.0, 200.0, 500.0]), 200.0, 3)
    s = BracketScheme.uniform()
    assert s.top == 80000.0
    assert s.midpoints[0] == 100.0


def test_cells_aggregate_additively():
    rows = [RawCellRow("A", 5, 1, 2018, 10, 100), RawCellRow("A", 10, 1, 2018, 30, 500)]
    (c,) = reduce_dimensions(rows, MAPPING)
    assert (c.region, c.sector, c.age_group, c.year) == ("A", 4, "young", 2018)
    assert (c.employees, c.wage_bill, c.mean_wage) == (40.0, 600.0, 15.0)


def test_fifteen_regions_give_270_cells(tmp_path):
    rows = []
    for r in range(15):
        for code in range(1, 11):
            for band in range(1, 8):
                rows.append((f"R{r:02d}", code, band, 2018, 2, 30000))
    p = write_csv(tmp_path / "m190.csv", ["region", "sector_code", "age_band", "year", "employees", "wage_bill"], rows)
    cells = load_cell_aggregates(p, MAPPING)
    assert len(cells) == 15 * 6 * 3 == 270
    per_region = {}
    for c in cells:
        per_region[c.region] = per_region.get(c.region, 0) + 1
    assert set(per_region.values()) == {18}
    assert sum(c.employees for c in cells) == 2 * len(rows)


def test_unknown_sector_code(tmp_path):
    p = write_csv(
        tmp_path / "m190.csv",
        ["region", "sector_code", "age_band", "year", "employees", "wage_bill"],
        [("A", 11, 1, 2018, 1, 100)],
    )
    with pytest.raises(UnmappedCode, match="11"):
        load_cell_aggregates(p, MAPPING)


def test_mapping_round_trip(tmp_path):
    MAPPING.to_json(tmp_path / "map.json")
    m = load_mapping(tmp_path / "map.json")
    assert m == MAPPING
    doc = json.loads((tmp_path / "map.json").read_text())
    assert set(doc["sector_map"].values()) == set(SECTORS)


def test_default_age_collapse():
    groups = collapse_age_bands({1: (16, 20), 2: (20, 25), 3: (25, 30), 4: (30, 40), 5: (40, 50), 6: (50, 60), 7: (60, 70)})
    assert groups == {1: "young", 2: "young", 3: "young", 4: "adult", 5: "adult", 6: "mature", 7: "mature"}
    assert set(MAPPING.age_map.values()) == set(AGE_GROUPS)


def test_deflate_identities():
    d = Deflator.rebased(2019, {2018: 1.05, 2019: 1.0})
    assert deflate(100.0, 2019, d) == 100.0
    assert deflate(105.0, 2018, d) == pytest.approx(100.0, rel=1e-15)
    with pytest.raises(UnknownYear):
        deflate(1.0, 2030, d)


def test_deflate_matches_real_minimum_wage(census):
    nominal = census.policy.smi_nominal[2018]
    assert deflate(nominal, 2018, census.deflator) == pytest.approx(10375.0, rel=1e-12)


def test_load_deflator_rebases(tmp_path):
    p = write_csv(tmp_path / "cpi.csv", ["year", "index"], [(2018, 98.1), (2019, 100)])
    d = load_deflator(p, 2019)
    assert d.index(2019) == 1.0
    assert d.index(2018) == pytest.approx(0.981)


@given(st.floats(1e-6, 1e9), st.floats(0.2, 5.0))
def test_deflate_invertible(value, index):
    d = Deflator.rebased(2019, {2019: 1.0, 2017: index})
    assert d.inflate(d.deflate(value, 2017), 2017) == pytest.approx(value, rel=1e-12)


def _panel_cells(regions, years):
    return [CellAggregate(r, s, a, y, 1.0, 1.0) for r in regions for s in SECTORS for a in AGE_GROUPS for y in years]


def test_balanced_panel_skeleton():
    regions = [f"R{i:02d}" for i in range(15)]
    years = range(2009, 2024)
    sk = validate_balanced_panel(_panel_cells(regions, years), years)
    assert len(sk.imputation_units) == 270
    assert len(sk.estimation_units) == 90
    assert sk.n_unit_years == 1350


def test_missing_cell_year_is_named():
    cells = _panel_cells(["A", "B"], [2018, 2019])
    cells = [c for c in cells if c.key != ("B", 3, "adult", 2019)]
    with pytest.raises(UnbalancedPanel, match="'B', 3, 'adult', 2019") as info:
        validate_balanced_panel(cells, [2018, 2019])
    assert info.value.missing == [("B", 3, "adult", 2019)]


def test_empty_input_lists_every_cell_year():
    with pytest.raises(UnbalancedPanel) as info:
        validate_balanced_panel([], [2018, 2019], regions=["A"])
    assert len(info.value.missing) == 18 * 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 10), st.integers(1, 7), st.integers(0, 10**6), st.integers(0, 10**9)), min_size=1, max_size=40), st.randoms())
def test_reduction_conserves_mass_and_ignores_order(raw, rnd):
    rows = [RawCellRow("A", c, b, 2018, Decimal(e) / 7, Decimal(w) / 3) for c, b, e, w in raw]
    out = reduce_dimensions(rows, MAPPING)
    e_in = float(sum(Decimal(e) / 7 for _, _, e, _ in raw))
    w_in = float(sum(Decimal(w) / 3 for _, _, _, w in raw))
    assert sum(c.employees for c in out) == pytest.approx(e_in, rel=1e-9, abs=1e-9)
    assert sum(c.wage_bill for c in out) == pytest.approx(w_in, rel=1e-9, abs=1e-9)
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    assert reduce_dimensions(shuffled, MAPPING) == out


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.integers(0, 9), st.floats(0.5, 100)), min_size=1, max_size=30, unique_by=lambda t: (t[0], t[1])))
def test_bracket_loading_order_insensitive(rows):
    scheme = BracketScheme.uniform(10, 200)
    brs = [BracketRow(r, 2018, k, e, e * (200 * k + 100)) for r, k, e in rows]
    a = aggregate_brackets(brs, scheme)
    random.Random(0).shuffle(brs)
    b = aggregate_brackets(brs, scheme)
    for x, y in zip(a, b):
        assert np.array_equal(x.employees, y.employees) and np.array_equal(x.wage_mass, y.wage_mass)
