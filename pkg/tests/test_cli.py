from __future__ import annotations

import json
import shutil
import subprocess
import sys
import xml.etree.ElementTree as ET

import pandas as pd
import pytest

from bitekit import svg
from bitekit.cli import main

STAGES = ("impute", "bite", "estimate", "honest", "report")


def run(*argv):
    return main([str(a) for a in argv])


def edit_config(path, **changes):
    doc = json.loads(path.read_text())
    doc.update(changes)
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert run("synth", "--out", d, "--beta", 0.1, "--noise-sd", 0.02) == 0
    edit_config(d / "config.json", wald={"draws": 199})
    return d


@pytest.fixture(scope="module")
def full_run(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "out"
    codes = {s: run(s, "--config", data_dir / "config.json", "--out", out) for s in STAGES}
    return out, codes


def private_copy(data_dir, tmp_path):
    d = tmp_path / "data"
    shutil.copytree(data_dir, d)
    return d


def test_synth_writes_inputs_and_truth(data_dir):
    for f in ("modelo100.csv", "modelo190.csv", "modelo390.csv", "cpi.csv", "mapping.json", "ground_truth.json", "config.json"):
        assert (data_dir / f).is_file(), f
    truth = json.loads((data_dir / "ground_truth.json").read_text())
    assert truth["planted"]["beta"] == 0.1 and len(truth["exposures"]) == 90


def test_all_stages_succeed(full_run):
    out, codes = full_run
    assert codes == dict.fromkeys(STAGES, 0)
    closure = json.loads((out / "closure_report.json").read_text())
    assert closure["passed"] is True
    cells = pd.read_csv(out / "imputed_cells.csv", comment="#")
    assert len(cells) == 270 * 15
    ex = pd.read_csv(out / "exposures.csv", comment="#")
    assert len(ex) == 90
    assert len(list((out / "fits").glob("*.json"))) == 12
    assert len(pd.read_csv(out / "sensitivity.csv", comment="#")) == 4 * 11


def test_outputs_carry_provenance(full_run):
    out, _ = full_run
    first = (out / "exposures.csv").read_text().splitlines()[0]
    assert first.startswith("# config_hash: ") and "seed: 20190" in first
    fit = json.loads((out / "fits" / "d_youth_event.json").read_text())
    assert fit["seed"] == 20190 and len(fit["config_hash"]) == 16 and "wald" in fit


def test_report_sections(full_run):
    out, _ = full_run
    text = (out / "report.txt").read_text()
    for heading in (
        "Provenance",
        "Macroeconomic context",
        "Treatment intensity across units",
        "Fixed-effects estimates",
        "Joint pre-period tests",
        "Sensitivity to parallel-trend violations",
    ):
        assert heading in text
    assert "notice:" not in text


def test_report_reruns_identical_but_for_timestamp(full_run, data_dir):
    out, _ = full_run
    before = (out / "report.txt").read_text().splitlines()
    assert run("report", "--config", data_dir / "config.json", "--out", out) == 0
    after = (out / "report.txt").read_text().splitlines()
    diff = [i for i, (a, b) in enumerate(zip(before, after)) if a != b]
    assert len(before) == len(after)
    assert all("generated:" in before[i] for i in diff)


def test_report_without_sensitivity_has_notice(full_run, data_dir, tmp_path):
    out, _ = full_run
    partial = tmp_path / "partial"
    shutil.copytree(out, partial)
    for f in ("breakdown.json", "sensitivity.csv", "sensitivity.svg"):
        (partial / f).unlink()
    assert run("report", "--config", data_dir / "config.json", "--out", partial) == 0
    assert "notice: no sensitivity artifacts found" in (partial / "report.txt").read_text()


def test_report_missing_artifacts(data_dir, tmp_path, capsys):
    assert run("report", "--config", data_dir / "config.json", "--out", tmp_path / "empty") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "MissingArtifacts" and err["exit_code"] == 2


def test_corrupted_bracket_file_names_row(data_dir, tmp_path, capsys):
    d = private_copy(data_dir, tmp_path)
    lines = (d / "modelo100.csv").read_text().splitlines()
    parts = lines[2].split(",")
    parts[3] = "-5"
    lines[2] = ",".join(parts)
    (d / "modelo100.csv").write_text("\n".join(lines) + "\n")
    assert run("impute", "--config", d / "config.json", "--out", tmp_path / "o") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "NegativeCount"
    assert "modelo100.csv row 3" in err["message"]


def test_empty_year_range(data_dir, tmp_path, capsys):
    d = private_copy(data_dir, tmp_path)
    edit_config(d / "config.json", years=[2020, 2019])
    assert run("impute", "--config", d / "config.json", "--out", tmp_path / "o") == 2
    assert json.loads(capsys.readouterr().err)["error"] == "InvalidConfig"


def test_unknown_config_key(data_dir, tmp_path, capsys):
    d = private_copy(data_dir, tmp_path)
    edit_config(d / "config.json", colour="red")
    assert run("bite", "--config", d / "config.json", "--out", tmp_path / "o") == 2
    assert "colour" in json.loads(capsys.readouterr().err)["message"]


def test_static_grid_over_outcomes(data_dir, tmp_path):
    d = private_copy(data_dir, tmp_path)
    edit_config(d / "config.json", designs=["static"], outcomes=["employment", "firms", "sales"])
    out = tmp_path / "o"
    assert run("estimate", "--config", d / "config.json", "--out", out) == 0
    names = sorted(p.stem for p in (out / "fits").glob("*.json"))
    assert len(names) == 12
    assert "d_gap_static_sales" in names and "d_youth_static" in names
    summary = pd.read_csv(out / "summary.csv", comment="#")
    assert set(summary["outcome"]) == {"employment", "firms", "sales"}


def test_single_bite(data_dir, tmp_path):
    d = private_copy(data_dir, tmp_path)
    edit_config(d / "config.json", designs=["static"], bites=["d_kaitz"])
    out = tmp_path / "o"
    assert run("estimate", "--config", d / "config.json", "--out", out) == 0
    assert [p.name for p in (out / "fits").glob("*.json")] == ["d_kaitz_static.json"]


def test_rank_deficient_fit_isolated(data_dir, tmp_path):
    d = private_copy(data_dir, tmp_path)
    edit_config(d / "config.json", designs=["static"])
    out = tmp_path / "o"
    assert run("bite", "--config", d / "config.json", "--out", out) == 0
    path = out / "exposures.csv"
    head = path.read_text().splitlines(keepends=True)[0]
    ex = pd.read_csv(path, comment="#").assign(d_gap=0.05)
    path.write_text(head + ex.to_csv(index=False))
    assert run("estimate", "--config", d / "config.json", "--out", out) == 3
    err = json.loads((out / "fits" / "d_gap_static.error.json").read_text())
    assert err["error"] == "RankDeficient" and err["fit_name"] == "d_gap_static"
    ok = sorted(p.name for p in (out / "fits").glob("*_static.json"))
    assert ok == ["d_kaitz_static.json", "d_sectoral_static.json", "d_youth_static.json"]
    assert run("report", "--config", d / "config.json", "--out", out) == 0
    assert "d_gap_static: RankDeficient" in (out / "report.txt").read_text()


def test_honest_needs_event_fits(data_dir, tmp_path, capsys):
    assert run("honest", "--config", data_dir / "config.json", "--out", tmp_path / "o") == 2
    assert json.loads(capsys.readouterr().err)["error"] == "MissingFit"


def test_honest_single_point_grid(full_run, data_dir, tmp_path):
    out, _ = full_run
    d = private_copy(data_dir, tmp_path)
    edit_config(d / "config.json", sensitivity={"mbar_grid": [0]})
    o = tmp_path / "o"
    shutil.copytree(out / "fits", o / "fits")
    assert run("honest", "--config", d / "config.json", "--out", o) == 0
    s = pd.read_csv(o / "sensitivity.csv", comment="#")
    assert len(s) == 4 and (s["mbar"] == 0).all()


@pytest.mark.slow
def test_fragile_preset_breaks_down_early(tmp_path):
    d = tmp_path / "data"
    assert run("synth", "--preset", "fragile", "--out", d) == 0
    edit_config(d / "config.json", designs=["event"], bites=["d_kaitz"], wald={"draws": 99})
    out = tmp_path / "o"
    assert run("estimate", "--config", d / "config.json", "--out", out) == 0
    assert run("honest", "--config", d / "config.json", "--out", out) == 0
    b = json.loads((out / "breakdown.json").read_text())["breakdown"]["d_kaitz"]
    assert b["finite"] and 0.1 <= b["mbar_star"] <= 0.3


@pytest.mark.slow
def test_null_preset_covers_zero(tmp_path):
    d = tmp_path / "data"
    assert run("synth", "--out", d, "--noise-sd", 0.05) == 0
    edit_config(d / "config.json", designs=["event"], wald={"draws": 99})
    out = tmp_path / "o"
    assert run("estimate", "--config", d / "config.json", "--out", out) == 0
    assert run("honest", "--config", d / "config.json", "--out", out) == 0
    s = pd.read_csv(out / "sensitivity.csv", comment="#")
    assert s["contains_zero"].all()


def _parse(path):
    return ET.parse(path).getroot()


def test_figures_are_valid_svg(full_run):
    out, _ = full_run
    ns = {"s": "http://www.w3.org/2000/svg"}
    for name in ("event_study.svg", "sensitivity.svg"):
        root = _parse(out / name)
        assert root.tag.endswith("svg")
        assert root.findall(".//s:line[@class='zero']", ns) or root.findall(".//line[@class='zero']")


def test_svg_writers_directly(tmp_path):
    frame = pd.DataFrame(
        {"year": [2017, 2018, 2019], "estimate": [0.01, 0.0, 0.1], "se": [0.01, 0.0, 0.02], "ci_low": [-0.01, 0.0, 0.06], "ci_high": [0.03, 0.0, 0.14]}
    )
    svg.event_study_svg({"A": frame, "B": frame}, tmp_path / "e.svg", reference_year=2018)
    assert _parse(tmp_path / "e.svg").tag.endswith("svg")


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "bitekit", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
