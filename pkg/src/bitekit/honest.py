"""Sensitivity of event-study estimates to bounded parallel-trend violations.

The post-period bias is bounded by ``mbar * maxpre * h``: ``maxpre`` is the
largest pre-period deviation and ``h`` the number of periods between the
reference year and the target year (linear accumulation). The robust
interval widens the conventional one by that bound on each side.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidSpec, MissingTarget, NoPrePeriods
from .fe import FixedEffectsFit

MAXPRE_RULES = ("level", "difference")
CRITICAL = ("normal", "t")
ACCUMULATION = ("linear",)


def default_grid() -> tuple:
    return tuple(i / 10 for i in range(11))


@dataclass(frozen=True)
class SensitivitySpec:
    mbar_grid: tuple = field(default_factory=default_grid)
    alpha: float = 0.05
    target_year: int = 2019
    maxpre_rule: str = "level"
    critical: str = "normal"
    accumulation: str = "linear"
    prefix: str = "beta"

    def __post_init__(self):
        grid = tuple(float(m) for m in self.mbar_grid)
        object.__setattr__(self, "mbar_grid", grid)
        if not grid or grid[0] != 0.0:
            raise InvalidSpec("mbar grid must start at 0")
        if any(b < a for a, b in zip(grid, grid[1:])) or any(not math.isfinite(m) for m in grid):
            raise InvalidSpec("mbar grid must be finite and nondecreasing")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidSpec(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.maxpre_rule not in MAXPRE_RULES:
            raise InvalidSpec(f"maxpre_rule must be one of {MAXPRE_RULES}")
        if self.critical not in CRITICAL:
            raise InvalidSpec(f"critical must be one of {CRITICAL}")
        if self.accumulation not in ACCUMULATION:
            raise InvalidSpec(f"accumulation must be one of {ACCUMULATION}")

    @property
    def target(self) -> str:
        return f"{self.prefix}_{self.target_year}"


@dataclass(frozen=True)
class RobustInterval:
    mbar: float
    lower: float
    upper: float
    bias_bound: float

    @property
    def contains_zero(self) -> bool:
        return self.lower <= 0.0 <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class BreakdownPoint:
    mbar_star: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.mbar_star)


@dataclass(frozen=True)
class _Inputs:
    estimate: float
    se: float
    crit: float
    maxpre: float
    horizon: int


def pre_coefficients(fit: FixedEffectsFit, prefix: str = "beta") -> dict[int, float]:
    ref = fit.design.reference_year
    out = {}
    for y in fit.years:
        name = f"{prefix}_{y}"
        if y < ref and name in fit.names:
            out[int(y)] = fit.estimate(name)
    return out


def max_pretrend(fit: FixedEffectsFit, rule: str = "level", prefix: str = "beta") -> float:
    """Largest absolute pre-period coefficient (``level``) or largest
    absolute change between consecutive pre-period coefficients, the
    reference year counting as 0 (``difference``)."""
    pre = pre_coefficients(fit, prefix)
    if not pre:
        raise NoPrePeriods("fit has no pre-period coefficients")
    if rule == "level":
        return float(max(abs(v) for v in pre.values()))
    path = [pre[y] for y in sorted(pre)] + [0.0]
    return float(np.max(np.abs(np.diff(path))))


def _inputs(fit: FixedEffectsFit, spec: SensitivitySpec) -> _Inputs:
    if spec.target not in fit.names:
        raise MissingTarget(f"fit has no coefficient {spec.target!r}")
    maxpre = max_pretrend(fit, spec.maxpre_rule, spec.prefix)
    horizon = spec.target_year - fit.design.reference_year
    if horizon < 1:
        raise InvalidSpec("target year must follow the reference year")
    q = 1.0 - spec.alpha / 2.0
    crit = float(stats.norm.ppf(q)) if spec.critical == "normal" else float(stats.t.ppf(q, fit.df_resid))
    return _Inputs(fit.estimate(spec.target), fit.std_error(spec.target), crit, maxpre, horizon)


def _interval(a: _Inputs, mbar: float) -> RobustInterval:
    bound = mbar * a.maxpre * a.horizon
    half = a.crit * a.se
    # (b - B) - z*se keeps mbar = 0 bit-identical to b - z*se
    return RobustInterval(float(mbar), (a.estimate - bound) - half, (a.estimate + bound) + half, bound)


def conventional_interval(fit: FixedEffectsFit, spec: SensitivitySpec | None = None) -> tuple[float, float]:
    a = _inputs(fit, spec or SensitivitySpec())
    return a.estimate - a.crit * a.se, a.estimate + a.crit * a.se


def robust_interval(fit: FixedEffectsFit, spec: SensitivitySpec | None = None, mbar: float = 0.0) -> RobustInterval:
    if mbar < 0 or not math.isfinite(mbar):
        raise InvalidSpec(f"mbar must be finite and nonnegative, got {mbar}")
    return _interval(_inputs(fit, spec or SensitivitySpec()), mbar)


def sensitivity_curve(fit: FixedEffectsFit, spec: SensitivitySpec | None = None) -> list[RobustInterval]:
    spec = spec or SensitivitySpec()
    a = _inputs(fit, spec)
    return [_interval(a, m) for m in spec.mbar_grid]


def breakdown_mbar(fit: FixedEffectsFit, spec: SensitivitySpec | None = None) -> BreakdownPoint:
    """Smallest mbar whose robust interval contains zero."""
    a = _inputs(fit, spec or SensitivitySpec())
    excess = abs(a.estimate) - a.crit * a.se
    if excess <= 0:
        return BreakdownPoint(0.0)
    if a.maxpre == 0:
        return BreakdownPoint(math.inf)
    return BreakdownPoint(excess / (a.maxpre * a.horizon))


def write_sensitivity_csv(
    curves: dict[str, Sequence[RobustInterval]] | Iterable[tuple[str, Sequence[RobustInterval]]],
    path,
    header_comment: str | None = None,
) -> None:
    items = curves.items() if isinstance(curves, dict) else curves
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["measure", "mbar", "lower", "upper", "contains_zero"])
        for measure, curve in items:
            for ri in curve:
                w.writerow([measure, repr(ri.mbar), repr(float(ri.lower)), repr(float(ri.upper)), str(ri.contains_zero).lower()])


def read_sensitivity_csv(path) -> dict[str, list[RobustInterval]]:
    out: dict[str, list[RobustInterval]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            out.setdefault(r["measure"], []).append(
                RobustInterval(float(r["mbar"]), float(r["lower"]), float(r["upper"]), float("nan"))
            )
    return out
