from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from bitekit import dist, fe, honest, synth
from bitekit.cli import _exposures, load_config, load_inputs
from bitekit.errors import InvalidSpec
from bitekit.pipeline import impute, outcome_panel
from bitekit.synth import DgpSpec, generate_census
from bitekit.tilt import validate_closure

STATIC = fe.DesignSpec("static", treatment="d_youth")


def test_same_seed_same_census(tmp_path, census):
    again = generate_census(DgpSpec())
    assert again.bracket_rows == census.bracket_rows
    assert again.raw_cells == census.raw_cells
    assert again.firm_rows == census.firm_rows
    census.write(tmp_path / "a")
    again.write(tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    other = generate_census(DgpSpec(seed=7))
    assert other.raw_cells != census.raw_cells


def test_vanishing_dispersion_collapses_to_one_bracket():
    base = DgpSpec()
    flat = DgpSpec(
        sigma=1e-6,
        sigma_spread=0.0,
        young_sigma=1.0,
        young_sector_elasticity=0.0,
        region_wage_sd=0.0,
        cell_wage_sd=0.0,
        age_mix_sd=0.0,
        sector_shifts={k: 1.0 for k in base.sector_shifts},
        age_shifts={k: 1.0 for k in base.age_shifts},
        young_band_gradient={k: 1.0 for k in base.young_band_gradient},
    )
    for d in generate_census(flat).distributions():
        assert int((d.employees > 0).sum()) == 1
        assert dist.grouped_gini(d) == pytest.approx(0.0, abs=1e-12)


def test_ground_truth_survives_csv_round_trip(census_dir):
    truth = json.loads((census_dir / "ground_truth.json").read_text())
    cfg = load_config(census_dir / "config.json")
    inp = load_inputs(cfg)
    got = {v.unit: v for v in _exposures(cfg, inp, 1)}
    assert set(got) == set(truth["exposures"])
    worst = max(abs(getattr(got[u], m) - x) for u, row in truth["exposures"].items() for m, x in row.items())
    assert worst < 1e-6


def test_planted_outcome_path_recovered(census):
    p = outcome_panel("employment", cells=census.cells())
    planted = census.log_employment.stack()
    got = p.set_index(["unit", "year"])["outcome"]
    assert np.max(np.abs(got.sort_index() - planted.sort_index().to_numpy())) < 1e-9


def test_census_closes(census):
    res = impute(census.distributions(), census.cells(), census.deflator, census.policy)
    rep = validate_closure(res.imputed, census.cells())
    assert rep.passed, rep.worst_cell


def test_true_coefficients():
    s = DgpSpec(planted_beta=0.3, pretrend_slope=0.01, planted_delta_2020=-0.2)
    assert synth.true_coefficient(s, "beta") == 0.3
    assert synth.true_coefficient(s, "beta_2015") == pytest.approx(-0.03)
    assert synth.true_coefficient(s, "beta_2021") == pytest.approx(0.33)
    assert synth.true_coefficient(s, "delta_2020") == -0.2
    assert synth.true_coefficient(s, "delta_2021") == 0.0
    with pytest.raises(InvalidSpec):
        synth.true_coefficient(s, "gamma_2019")


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        DgpSpec(regions=1)
    with pytest.raises(InvalidSpec):
        DgpSpec(sigma=0.05, sigma_spread=0.05)
    with pytest.raises(InvalidSpec):
        DgpSpec(noise_sd=-1.0)
    with pytest.raises(InvalidSpec):
        DgpSpec(treatment="d_other")
    with pytest.raises(InvalidSpec):
        DgpSpec.from_dict({"seed": 1, "colour": "red"})
    s = DgpSpec(planted_beta=0.1)
    assert DgpSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_too_few_replications(census):
    with pytest.raises(InvalidSpec, match="100"):
        synth.monte_carlo(DgpSpec(), 99, STATIC, census)


def test_noise_calibration_is_exact(census):
    sd = synth.noise_for_se(census, STATIC, "beta", 0.1)
    w = synth.estimator_weights(STATIC, census.panel(), census.exposures)
    var = w.noise_variance(2018)[0, 0] * sd**2
    assert math.sqrt(var) == pytest.approx(0.1, rel=1e-12)
    f = synth.population_pretrend_f(census, [2015, 2016, 2017], slope=0.02, noise_sd=0.05)
    slope = synth.pretrend_slope_for_f(census, [2015, 2016, 2017], f, noise_sd=0.05)
    assert slope == pytest.approx(0.02, rel=1e-12)


@pytest.mark.slow
def test_monte_carlo_recovers_planted_effect(census):
    spec = replace(census.spec, planted_beta=0.25, noise_sd=synth.noise_for_se(census, STATIC, "beta", 0.1))
    mc = synth.monte_carlo(spec, 200, STATIC, census)
    s = mc.summary().set_index("name").loc["beta"]
    assert abs(s["bias"]) < 3 * s["mc_se"]
    # exact sampling sd is 0.1; the sd of 200 draws is within about 5%
    assert s["sd"] == pytest.approx(0.1, rel=0.15)
    assert 0.88 <= s["coverage"] <= 1.0
    again = synth.monte_carlo(spec, 200, STATIC, census, threads=3)
    assert again.estimates.equals(mc.estimates)


@pytest.mark.slow
def test_fragile_preset_targets_breakdown():
    spec = synth.fragile_positive()
    maxpre = spec.pretrend_slope * (spec.reference_year - spec.first_year)
    b2019 = synth.true_coefficient(spec, "beta_2019")
    z = stats.norm.ppf(0.975)
    se = maxpre / 40
    assert (b2019 - z * se) / maxpre == pytest.approx(0.2, rel=1e-12)
    census = generate_census(spec)
    f = fe.fit(fe.DesignSpec("event", treatment="d_kaitz"), census.panel(), census.exposures)
    lo, _ = honest.conventional_interval(f)
    assert lo > 0
    assert 0.1 <= honest.breakdown_mbar(f).mbar_star <= 0.3
