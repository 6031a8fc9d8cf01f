"""Command line driver.

Subcommands mirror the pipeline stages (``synth``, ``impute``, ``bite``,
``estimate``, ``honest``, ``report``); each reads a JSON configuration and
writes CSV/JSON/SVG artifacts under the output directory. Exit codes: 0
success, 2 validation error, 3 estimation error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import platform
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__, dist, fe, honest, svg, synth
from .bite import MEASURE_LABELS, MEASURES, exposure_descriptives, write_exposures
from .errors import (
    BitekitError,
    EstimationError,
    InvalidConfig,
    MissingArtifacts,
    MissingFit,
    ValidationError,
)
from .ingest import (
    BracketScheme,
    load_bracket_rows,
    aggregate_brackets,
    load_deflator,
    load_firm_outcomes,
    load_mapping,
    load_raw_cells,
    reduce_dimensions,
    validate_balanced_panel,
)
from .pipeline import OUTCOMES, PolicyParameters, compute_exposures, impute, outcome_panel
from .tilt import TierScheme, write_diagnostics

log = logging.getLogger("bitekit")

DESIGNS = ("static", "event", "ddd")
INPUT_KEYS = ("modelo100", "modelo190", "modelo390", "cpi", "mapping")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    inputs: dict
    smi: dict
    years: tuple
    base_year: int = 2019
    reference_year: int = 2018
    post_year: int = 2019
    region_map: dict = field(default_factory=dict)
    tier_thresholds: tuple | None = None
    tourism_codes: tuple = (5, 10)
    bites: tuple = MEASURES
    designs: tuple = DESIGNS
    outcomes: tuple = ("employment",)
    covariates: tuple = ()
    dof_rule: str = "nested"
    alpha: float = 0.05
    wald: dict = field(default_factory=dict)
    sensitivity: dict = field(default_factory=dict)
    seed: int = 0
    bracket_count: int = 400
    bracket_width: float = 200.0
    out: str | None = None
    source: Path | None = None  # directory the relative paths refer to

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise InvalidConfig("configuration must be a JSON object")
        known = set(cls.__dataclass_fields__) - {"source"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidConfig(f"unknown configuration keys {unknown}")
        for key in ("inputs", "smi", "years"):
            if key not in doc:
                raise InvalidConfig(f"configuration lacks {key!r}")
        inputs = doc["inputs"]
        if not isinstance(inputs, dict) or sorted(set(INPUT_KEYS) - set(inputs)):
            raise InvalidConfig(f"inputs must name {list(INPUT_KEYS)}")
        years = doc["years"]
        if not (isinstance(years, list) and len(years) == 2 and all(isinstance(y, int) for y in years)):
            raise InvalidConfig("years must be [first, last]")
        if years[0] > years[1]:
            raise InvalidConfig(f"empty year range {years[0]}..{years[1]}")
        try:
            smi = {int(k): float(v) for k, v in doc["smi"].items()}
        except (AttributeError, TypeError, ValueError):
            raise InvalidConfig("smi must map years to annual nominal amounts") from None
        kw = {k: v for k, v in doc.items() if k in known}
        kw.update(inputs=dict(inputs), smi=smi, years=tuple(years))
        for key in ("tourism_codes", "bites", "designs", "outcomes", "covariates"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if kw.get("tier_thresholds") is not None:
            kw["tier_thresholds"] = tuple(float(v) for v in kw["tier_thresholds"])
        cfg = cls(**kw, source=base_dir)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        bad = [b for b in self.bites if b not in MEASURES]
        if bad or not self.bites:
            raise InvalidConfig(f"bites must be a non-empty subset of {MEASURES}")
        bad = [d for d in self.designs if d not in DESIGNS]
        if bad or not self.designs:
            raise InvalidConfig(f"designs must be a non-empty subset of {DESIGNS}")
        bad = [o for o in self.outcomes if o not in OUTCOMES]
        if bad or not self.outcomes:
            raise InvalidConfig(f"outcomes must be a non-empty subset of {OUTCOMES}")
        missing = [y for y in self.year_list if y not in self.smi]
        if missing:
            raise InvalidConfig(f"smi series lacks years {missing}")
        if not self.years[0] <= self.reference_year < self.post_year <= self.years[1]:
            raise InvalidConfig("reference and post years must lie inside the year range, in that order")
        if self.dof_rule not in fe.DOF_RULES:
            raise InvalidConfig(f"dof_rule must be one of {fe.DOF_RULES}")
        if not 0 < self.alpha < 1:
            raise InvalidConfig("alpha must lie in (0, 1)")
        corr = self.wald.get("correction", "simulated")
        if corr not in fe.WALD_CORRECTIONS:
            raise InvalidConfig(f"wald.correction must be one of {fe.WALD_CORRECTIONS}")
        unknown = sorted(set(self.wald) - {"pre_years", "correction", "draws"})
        if unknown:
            raise InvalidConfig(f"unknown wald keys {unknown}")
        try:
            self.sensitivity_spec()
        except (TypeError, ValidationError) as exc:
            raise InvalidConfig(f"sensitivity: {exc}") from None

    @property
    def year_list(self) -> list[int]:
        return list(range(self.years[0], self.years[1] + 1))

    def path(self, key: str) -> Path:
        p = Path(self.inputs[key])
        return p if p.is_absolute() else (self.source or Path.cwd()) / p

    def policy(self) -> PolicyParameters:
        return PolicyParameters(
            self.smi,
            reference_year=self.reference_year,
            post_year=self.post_year,
            tier_thresholds=self.tier_thresholds,
            tourism_codes=self.tourism_codes,
        )

    def scheme(self) -> BracketScheme:
        return BracketScheme.uniform(int(self.bracket_count), float(self.bracket_width))

    def sensitivity_spec(self) -> honest.SensitivitySpec:
        s = dict(self.sensitivity)
        if "mbar_grid" in s:
            s["mbar_grid"] = tuple(s["mbar_grid"])
        s.setdefault("target_year", self.post_year)
        s.setdefault("alpha", self.alpha)
        return honest.SensitivitySpec(**s)

    def pre_years(self) -> list[int]:
        pre = self.wald.get("pre_years")
        if pre is None:
            return [y for y in self.year_list if y < self.reference_year]
        return [int(y) for y in pre]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("source", "out")}
        for k, v in list(d.items()):
            if isinstance(v, tuple):
                d[k] = list(v)
        d["smi"] = {str(y): v for y, v in sorted(self.smi.items())}
        return d

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_config(path, seed: int | None = None) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise InvalidConfig(f"configuration file {p} not found")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{p}: not valid JSON ({exc})") from None
    cfg = PipelineConfig.from_dict(doc, p.resolve().parent)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


# ---------------------------------------------------------------------------
# Shared stage helpers
# ---------------------------------------------------------------------------


@dataclass
class Inputs:
    distributions: list
    raw_cells: list
    cells: list
    firms: list | None
    deflator: object
    mapping: object
    policy: PolicyParameters


def load_inputs(cfg: PipelineConfig, need_firms: bool = False) -> Inputs:
    for key in INPUT_KEYS:
        if key == "modelo390" and not need_firms:
            continue
        if not cfg.path(key).is_file():
            raise InvalidConfig(f"input {key!r} not found at {cfg.path(key)}")
    years = set(cfg.year_list)
    mapping = load_mapping(cfg.path("mapping"))
    deflator = load_deflator(cfg.path("cpi"), cfg.base_year)
    region_map = cfg.region_map or None
    brackets = [r for r in load_bracket_rows(cfg.path("modelo100")) if r.year in years]
    dists = aggregate_brackets(brackets, cfg.scheme(), region_map, cfg.path("modelo100").name)
    raw = [r for r in load_raw_cells(cfg.path("modelo190")) if r.year in years]
    cells = reduce_dimensions(raw, mapping, region_map)
    validate_balanced_panel(cells, cfg.year_list)
    firms = None
    if need_firms:
        firms = [f for f in load_firm_outcomes(cfg.path("modelo390"), mapping, region_map) if f.year in years]
    return Inputs(dists, raw, cells, firms, deflator, mapping, cfg.policy())


def _comment(cfg: PipelineConfig) -> str:
    return f"config_hash: {cfg.hash()} seed: {cfg.seed}"


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _provenance(cfg: PipelineConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "version": __version__}


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def _exposures(cfg: PipelineConfig, inp: Inputs, threads: int):
    return compute_exposures(
        inp.distributions,
        inp.cells,
        inp.raw_cells,
        inp.mapping,
        inp.deflator,
        inp.policy,
        cfg.region_map or None,
        threads,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_doc = {}
    if args.spec:
        try:
            spec_doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read synthetic spec {args.spec}: {exc}") from None
    if args.preset == "fragile":
        spec = synth.fragile_positive(seed=spec_doc.get("seed", 20190))
        spec = replace(spec, **{k: v for k, v in spec_doc.items() if k != "seed"})
    else:
        spec = synth.DgpSpec.from_dict(spec_doc)
    overrides = {
        "seed": args.seed,
        "planted_beta": args.beta,
        "planted_delta_2020": args.delta,
        "pretrend_slope": args.slope,
        "noise_sd": args.noise_sd,
        "treatment": args.treatment,
    }
    spec = replace(spec, **{k: v for k, v in overrides.items() if v is not None})
    census = synth.generate_census(spec, threads=args.threads)
    cfg_path = census.write(args.out or "synthetic")
    print(cfg_path)
    return 0


def _imputed_rows(imputed, tiers: TierScheme):
    for ic in imputed:
        c = ic.cell
        yield [
            c.region, c.sector, c.age_group, c.year, repr(float(c.employees)), repr(float(c.wage_bill)),
            ic.solution.status.value if ic.solution else "Empty",
            *(repr(float(v)) for v in ic.employees_by_tier),
            *(repr(float(v)) for v in ic.wage_bill_by_tier),
        ]


def cmd_impute(args) -> int:
    cfg, out = _setup(args)
    inp = load_inputs(cfg)
    result = impute(inp.distributions, inp.cells, inp.deflator, inp.policy, threads=args.threads)
    tiers = result.tiers
    with (out / "imputed_cells.csv").open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_comment(cfg)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["region", "sector", "age_group", "year", "employees", "wage_bill", "status"]
            + [f"employees_{t}" for t in tiers.labels]
            + [f"wage_bill_{t}" for t in tiers.labels]
        )
        w.writerows(_imputed_rows(result.imputed, tiers))
    write_diagnostics(result.imputed, out / "tilt_diagnostics.csv", _comment(cfg))
    report = result.closure.to_dict() | {"tier_thresholds": list(tiers.thresholds)} | _provenance(cfg)
    _write_json(out / "closure_report.json", report)
    if not result.closure.passed:
        log.error("accounting closure failed for %d cells", len(result.closure.failing))
        return 3
    return 0


def macro_context(cfg: PipelineConfig, inp: Inputs) -> pd.DataFrame:
    """National series per year: SMI, mean wage, Kaitz ratio, effective
    bite and Gini from the pooled grouped distributions."""
    rows = []
    for y in cfg.year_list:
        g = dist.pool([d for d in inp.distributions if d.year == y], region="national")
        mean_nominal = dist.grouped_mean(g)
        real_smi = inp.deflator.deflate(cfg.smi[y], y)
        real_mean = inp.deflator.deflate(mean_nominal, y)
        rows.append(
            {
                "year": y,
                "real_smi": float(real_smi),
                "real_mean_wage": float(real_mean),
                "kaitz": dist.kaitz_ratio(real_smi, real_mean).ratio,
                "effective_bite": dist.effective_bite(g, cfg.smi[y]).percentile,
                "gini": dist.grouped_gini(g),
            }
        )
    return pd.DataFrame(rows)


def _write_frame(df: pd.DataFrame, path: Path, comment: str) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(df.columns)
        for row in df.itertuples(index=False):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def cmd_bite(args) -> int:
    cfg, out = _setup(args)
    inp = load_inputs(cfg)
    vectors = _exposures(cfg, inp, args.threads)
    write_exposures(vectors, out / "exposures.csv", _comment(cfg))
    desc = exposure_descriptives(vectors)
    _write_json(out / "descriptives.json", desc.to_dict() | _provenance(cfg))
    _write_frame(macro_context(cfg, inp), out / "macro_context.csv", _comment(cfg))
    return 0


def _exposure_table(cfg: PipelineConfig, out: Path, inp: Inputs, threads: int) -> pd.DataFrame:
    path = out / "exposures.csv"
    if path.is_file():
        return _read_csv(path)
    vectors = _exposures(cfg, inp, threads)
    write_exposures(vectors, path, _comment(cfg))
    return _read_csv(path)


def fit_name(bite: str, design: str, outcome: str) -> str:
    suffix = "" if outcome == "employment" else f"_{outcome}"
    return f"{bite}_{design}{suffix}"


def _headline(design: str, cfg: PipelineConfig, names: Sequence[str]) -> list[str]:
    if design == "static":
        return ["beta"]
    want = [f"beta_{cfg.post_year}", "beta_2020"] + (["delta_2020"] if design == "ddd" else [])
    return [n for i, n in enumerate(want) if n in names and n not in want[:i]]


def cmd_estimate(args) -> int:
    cfg, out = _setup(args)
    need_firms = any(o != "employment" for o in cfg.outcomes)
    inp = load_inputs(cfg, need_firms=need_firms)
    ex = _exposure_table(cfg, out, inp, args.threads)
    fits_dir = out / "fits"
    fits_dir.mkdir(parents=True, exist_ok=True)
    comment = _comment(cfg)
    summary, wald_doc, failures = [], {}, 0
    events = {}
    for outcome in cfg.outcomes:
        panel = outcome_panel(outcome, inp.cells, inp.firms, inp.deflator, cfg.year_list)
        for design in cfg.designs:
            for bite in cfg.bites:
                name = fit_name(bite, design, outcome)
                spec = fe.DesignSpec(
                    design,
                    treatment=bite,
                    post_year=cfg.post_year,
                    reference_year=cfg.reference_year,
                    include_covariates=bool(cfg.covariates),
                    covariates=cfg.covariates,
                )
                err_path = fits_dir / f"{name}.error.json"
                try:
                    f = fe.fit(spec, panel, ex, dof_rule=cfg.dof_rule)
                except (EstimationError, ValidationError) as exc:
                    failures += 1
                    log.error("fit %s failed: %s", name, exc)
                    _write_json(err_path, exc.to_dict() | {"fit_name": name} | _provenance(cfg))
                    continue
                if err_path.exists():
                    err_path.unlink()
                extra = {"fit_name": name} | _provenance(cfg)
                if design != "static":
                    try:
                        w = fe.wald_pretrend_test(
                            f,
                            cfg.pre_years(),
                            correction=cfg.wald.get("correction", "simulated"),
                            draws=int(cfg.wald.get("draws", fe.NULL_DRAWS)),
                            seed=cfg.seed,
                        )
                        extra["wald"] = wald_doc[name] = w.to_dict()
                    except (EstimationError, ValidationError) as exc:
                        failures += 1
                        log.error("pre-period test for %s failed: %s", name, exc)
                        extra["wald"] = wald_doc[name] = exc.to_dict()
                fe.write_fit_json(f, fits_dir / f"{name}.json", extra)
                if design != "static":
                    fe.write_event_csv(f, fits_dir / f"{name}_event.csv", header_comment=comment)
                    if design == "event" and outcome == "employment":
                        events[MEASURE_LABELS[bite]] = f.event_frame()
                tab = f.table(cfg.alpha).set_index("name")
                for coef in _headline(design, cfg, f.names):
                    r = tab.loc[coef]
                    summary.append(
                        {
                            "outcome": outcome, "design": design, "coefficient": coef, "bite": bite,
                            "estimate": float(r.estimate), "se": float(r.se), "p": float(r.p),
                            "n_obs": f.n_obs, "n_clusters": f.n_clusters, "within_r2": f.within_r2,
                        }
                    )
    if summary:
        long = pd.DataFrame(summary)
        _write_frame(_summary_wide(long, cfg), out / "summary.csv", comment)
    _write_json(out / "wald.json", {"tests": wald_doc, "pre_years": cfg.pre_years()} | _provenance(cfg))
    if events:
        svg.event_study_svg(events, out / "event_study.svg", reference_year=cfg.reference_year)
    return 3 if failures else 0


def _summary_wide(long: pd.DataFrame, cfg: PipelineConfig) -> pd.DataFrame:
    """One row per (outcome, design, coefficient, statistic), one column per bite."""
    stats_ = ["estimate", "se", "p", "n_obs", "n_clusters", "within_r2"]
    rows = []
    keys = long[["outcome", "design", "coefficient"]].drop_duplicates()
    for k in keys.itertuples(index=False):
        sub = long[(long.outcome == k.outcome) & (long.design == k.design) & (long.coefficient == k.coefficient)]
        sub = sub.set_index("bite")
        for s in stats_:
            row = {"outcome": k.outcome, "design": k.design, "coefficient": k.coefficient, "statistic": s}
            for b in cfg.bites:
                v = sub[s].get(b, float("nan"))
                row[b] = int(v) if s in ("n_obs", "n_clusters") and not pd.isna(v) else float(v)
            rows.append(row)
    return pd.DataFrame(rows)


def cmd_honest(args) -> int:
    cfg, out = _setup(args)
    spec = cfg.sensitivity_spec()
    curves, breakdown = {}, {}
    for bite in cfg.bites:
        path = out / "fits" / f"{fit_name(bite, 'event', 'employment')}.json"
        if not path.is_file():
            raise MissingFit(f"event-study fit for {bite} not found at {path}; run 'estimate' first")
        f = fe.read_fit_json(path)
        curves[bite] = honest.sensitivity_curve(f, spec)
        bp = honest.breakdown_mbar(f, spec)
        breakdown[bite] = {
            "mbar_star": bp.mbar_star if bp.finite else None,
            "finite": bp.finite,
            "maxpre": honest.max_pretrend(f, spec.maxpre_rule, spec.prefix),
            "estimate": f.estimate(spec.target),
            "se": f.std_error(spec.target),
        }
    sdir = out / "sensitivity"
    sdir.mkdir(parents=True, exist_ok=True)
    comment = _comment(cfg)
    for bite, curve in curves.items():
        honest.write_sensitivity_csv({bite: curve}, sdir / f"{bite}.csv", comment)
    honest.write_sensitivity_csv(curves, out / "sensitivity.csv", comment)
    doc = {
        "target": spec.target,
        "alpha": spec.alpha,
        "maxpre_rule": spec.maxpre_rule,
        "critical": spec.critical,
        "breakdown": breakdown,
    }
    _write_json(out / "breakdown.json", doc | _provenance(cfg))
    svg.sensitivity_svg(curves, out / "sensitivity.svg", labels=MEASURE_LABELS)
    return 0


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def _fmt(v, digits: int = 3) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "n/a"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.{digits}f}"


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> list[str]:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for j, r in enumerate(cells):
        lines.append("  ".join(c.rjust(widths[i]) if i else c.ljust(widths[i]) for i, c in enumerate(r)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return lines


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def build_report(cfg: PipelineConfig, out: Path) -> str:
    required = ["exposures.csv", "descriptives.json", "summary.csv"]
    missing = [r for r in required if not (out / r).is_file()]
    if missing:
        raise MissingArtifacts(f"missing artifacts in {out}: {missing}; run 'bite' and 'estimate' first")
    lines = ["bitekit report", "=" * 14, ""]
    lines += [
        "Provenance",
        f"  generated: {_timestamp()}",
        f"  config_hash: {cfg.hash()}",
        f"  seed: {cfg.seed}",
        f"  bitekit {__version__}; python {platform.python_version()}; numpy {np.__version__}; "
        f"scipy {scipy.__version__}; pandas {pd.__version__}",
        "",
    ]
    macro = out / "macro_context.csv"
    if macro.is_file():
        m = _read_csv(macro)
        lines.append("Macroeconomic context (constant euros)")
        rows = [
            [int(r.year), f"{r.real_smi:,.0f}", f"{r.real_mean_wage:,.0f}", f"{100 * r.kaitz:.1f}", f"{r.effective_bite:.1f}", f"{r.gini:.3f}"]
            for r in m.itertuples(index=False)
        ]
        lines += ["  " + s for s in _table(["year", "real SMI", "mean wage", "Kaitz %", "P_SMI %", "Gini"], rows)]
        lines.append("")
    desc = json.loads((out / "descriptives.json").read_text(encoding="utf-8"))
    lines.append("Treatment intensity across units")
    stat_rows = []
    for stat in ("mean", "sd", "cv", "min", "p25", "median", "p75", "max"):
        stat_rows.append([stat] + [_fmt(desc["stats"][m][stat]) for m in MEASURES if m in desc["stats"]])
    lines += ["  " + s for s in _table(["statistic"] + [MEASURE_LABELS[m] for m in MEASURES if m in desc["stats"]], stat_rows)]
    lines.append("  Pearson correlations")
    cm = [m for m in MEASURES if m in desc["pearson"]]
    lines += ["    " + s for s in _table([""] + cm, [[a] + [_fmt(desc["pearson"][a][b]) for b in cm] for a in cm])]
    lines.append("")

    summ = _read_csv(out / "summary.csv")
    bites = [b for b in MEASURES if b in summ.columns]
    lines.append("Fixed-effects estimates (clustered by region)")
    for (outcome, design, coef), sub in summ.groupby(["outcome", "design", "coefficient"], sort=False):
        lines.append(f"  {outcome} / {design} / {coef}")
        rows = []
        for r in sub.itertuples(index=False):
            rows.append([r.statistic] + [_fmt(getattr(r, b), 0 if r.statistic in ("n_obs", "n_clusters") else 3) for b in bites])
        lines += ["    " + s for s in _table(["statistic"] + [MEASURE_LABELS[b] for b in bites], rows)]
    lines.append("")
    wald = out / "wald.json"
    if wald.is_file():
        wd = json.loads(wald.read_text(encoding="utf-8"))
        if wd["tests"]:
            lines.append(f"Joint pre-period tests (years {wd['pre_years'][0]}-{wd['pre_years'][-1]})")
            rows = [
                [k, _fmt(v["statistic"], 2), v["df_num"], v["df_den"], _fmt(v["p_value"], 4), v["correction"]]
                if "error" not in v
                else [k, "failed", "", "", "", v["error"]]
                for k, v in sorted(wd["tests"].items())
            ]
            lines += ["  " + s for s in _table(["fit", "F", "q", "df", "p", "reference"], rows)]
            lines.append("")
    errors = sorted((out / "fits").glob("*.error.json")) if (out / "fits").is_dir() else []
    if errors:
        lines.append("Failed fits")
        for e in errors:
            d = json.loads(e.read_text(encoding="utf-8"))
            lines.append(f"  {d.get('fit_name', e.stem)}: {d['error']}: {d['message']}")
        lines.append("")
    bd = out / "breakdown.json"
    lines.append("Sensitivity to parallel-trend violations")
    if bd.is_file():
        b = json.loads(bd.read_text(encoding="utf-8"))
        rows = [
            [MEASURE_LABELS.get(k, k), _fmt(v["estimate"]), _fmt(v["se"]), _fmt(v["maxpre"]), _fmt(v["mbar_star"], 3) if v["finite"] else "inf"]
            for k, v in sorted(b["breakdown"].items(), key=lambda kv: MEASURES.index(kv[0]))
        ]
        lines.append(f"  target {b['target']}, alpha {b['alpha']}, maxpre rule {b['maxpre_rule']}")
        lines += ["  " + s for s in _table(["measure", "estimate", "se", "maxpre", "breakdown M-bar"], rows)]
    else:
        lines.append("  notice: no sensitivity artifacts found; run 'honest' to add this section")
    lines.append("")
    return "\n".join(lines)


def cmd_report(args) -> int:
    cfg, out = _setup(args)
    text = build_report(cfg, out)
    (out / "report.txt").write_text(text, encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _setup(args) -> tuple[PipelineConfig, Path]:
    if not args.config:
        raise InvalidConfig("--config is required for this command")
    cfg = load_config(args.config, args.seed)
    out = Path(args.out or cfg.out or "out")
    if not out.is_absolute() and cfg.out and not args.out:
        out = cfg.source / out
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


COMMANDS = {
    "synth": cmd_synth,
    "impute": cmd_impute,
    "bite": cmd_bite,
    "estimate": cmd_estimate,
    "honest": cmd_honest,
    "report": cmd_report,
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="pipeline configuration (JSON)")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--seed", type=int, default=d, help="override the configured seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitekit", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write a synthetic census and a matching configuration",
        "impute": "impute wage distributions for every cell and check closure",
        "bite": "build treatment-intensity measures and descriptives",
        "estimate": "fit static, event-study and triple-difference models",
        "honest": "sensitivity of event-study estimates to pre-trend violations",
        "report": "assemble a plain-text report from existing artifacts",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        _global_flags(sp, suppress=True)
        if name == "synth":
            sp.add_argument("--spec", help="JSON file with generator parameters")
            sp.add_argument("--preset", choices=("default", "fragile"), default="default")
            sp.add_argument("--beta", type=float, help="planted effect")
            sp.add_argument("--delta", type=float, help="planted 2020 tourism effect")
            sp.add_argument("--slope", type=float, help="differential pre-trend slope")
            sp.add_argument("--noise-sd", dest="noise_sd", type=float, help="outcome noise")
            sp.add_argument("--treatment", choices=MEASURES, help="measure the outcome responds to")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("BITEKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except BitekitError as exc:
        code = 3 if isinstance(exc, EstimationError) else 2
        print(json.dumps(exc.to_dict() | {"exit_code": code}, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
