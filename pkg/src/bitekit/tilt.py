"""Exponential tilting of a regional wage distribution onto cell means.

For a cell with mean wage ``m`` and a regional prior ``q`` over wage points
``w``, the minimum-KL reweighting subject to ``sum(p) = 1`` and
``sum(p * w) = m`` is ``p_k ∝ q_k exp(lam * w_k)``. The tilted mean is
strictly increasing in ``lam`` (its derivative is the tilted variance), so
``lam`` is the unique root of a monotone scalar equation.
"""

from __future__ import annotations

import csv
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import rel_entr

from .errors import (
    EmptyDistribution,
    IndexMismatch,
    InfeasibleTarget,
    InvalidDistribution,
    NoEmployment,
    NonConvergence,
    ValidationError,
)
from .ingest import CellAggregate, Deflator, GroupedDistribution

logger = logging.getLogger(__name__)

# Wages are solved in units of 10,000 euros; exp(lam * w) on raw euro
# supports overflows for any useful lam.
WAGE_SCALE = 1e4
MAX_ITER = 200
CORNER_SLACK = 1e-3
CLOSURE_THRESHOLD = 1e-5


class TiltStatus(str, enum.Enum):
    INTERIOR = "Interior"
    CORNER_LOW = "CornerLow"
    CORNER_HIGH = "CornerHigh"
    DEGENERATE = "Degenerate"


@dataclass(frozen=True, eq=False)
class TiltProblem:
    support: np.ndarray
    prior: np.ndarray
    target_mean: float

    def __post_init__(self):
        w = np.asarray(self.support, dtype=float)
        q = np.asarray(self.prior, dtype=float)
        object.__setattr__(self, "support", w)
        object.__setattr__(self, "prior", q)
        if w.ndim != 1 or w.shape != q.shape or w.size == 0:
            raise ValidationError("support and prior must be 1-D arrays of equal, non-zero length")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(q)) and np.isfinite(self.target_mean)):
            raise ValidationError("support, prior and target must be finite")
        if np.any(np.diff(w) <= 0):
            raise ValidationError("support must be strictly increasing")
        if np.any(q < 0):
            raise ValidationError("prior probabilities must be non-negative")
        if abs(q.sum() - 1.0) > 1e-12:
            raise ValidationError(f"prior must sum to 1 (sums to {q.sum()!r})")
        if not np.any(q > 0):
            raise ValidationError("prior has no positive mass")


@dataclass(frozen=True, eq=False)
class TiltSolution:
    lam: float
    posterior: np.ndarray
    achieved_mean: float
    kl_divergence: float
    status: TiltStatus
    iterations: int = 0


def _tilt(log_q: np.ndarray, x: np.ndarray, theta: float):
    """Posterior, mean and variance of ``x`` under the tilt ``theta``."""
    a = log_q + theta * x
    a -= a.max()
    e = np.exp(a)
    p = e / e.sum()
    m = float(p @ x)
    d = x - m
    v = float(p @ (d * d))
    return p, m, v


def _corner(problem: TiltProblem, k: int, status: TiltStatus) -> TiltSolution:
    p = np.zeros_like(problem.prior)
    p[k] = 1.0
    lam = {TiltStatus.CORNER_LOW: -np.inf, TiltStatus.CORNER_HIGH: np.inf}.get(status, 0.0)
    return TiltSolution(
        lam=lam,
        posterior=p,
        achieved_mean=float(problem.support[k]),
        kl_divergence=float(-np.log(problem.prior[k])),
        status=status,
    )


def _untilted(problem: TiltProblem) -> TiltSolution:
    q = problem.prior.astype(float, copy=True)
    return TiltSolution(lam=0.0, posterior=q, achieved_mean=float(q @ problem.support), kl_divergence=0.0, status=TiltStatus.INTERIOR)


def solve_tilt(
    problem: TiltProblem,
    tol: float = 1e-9,
    max_iter: int = MAX_ITER,
    slack: float = CORNER_SLACK,
) -> TiltSolution:
    """Minimum-KL reweighting of ``problem.prior`` to hit ``problem.target_mean``.

    Parameters
    ----------
    tol : relative tolerance on the achieved mean.
    max_iter : total budget for bracket expansion plus refinement.
    slack : targets up to this relative distance beyond the supported range
        are snapped to the corner instead of rejected.

    The root is bracketed by geometric expansion from ``lam = 0`` and then
    refined by Newton steps (derivative = tilted variance), falling back to
    bisection whenever a step leaves the bracket.
    """
    if not tol > 0:
        raise ValidationError("tol must be positive")
    w, q, t = problem.support, problem.prior, float(problem.target_mean)
    active = np.flatnonzero(q > 0)
    k_lo, k_hi = int(active[0]), int(active[-1])
    lo, hi = float(w[k_lo]), float(w[k_hi])

    if t < lo - slack * abs(lo) or t > hi + slack * abs(hi):
        raise InfeasibleTarget(f"target mean {t!r} outside supported range [{lo!r}, {hi!r}]")
    if k_lo == k_hi:
        return _corner(problem, k_lo, TiltStatus.DEGENERATE)
    # a prior that already meets the target needs no tilt, even when its
    # mean rounds onto an end of the support
    if abs(float(q @ w) - t) <= tol * (abs(t) if t != 0 else hi - lo):
        return _untilted(problem)
    if t <= lo:
        return _corner(problem, k_lo, TiltStatus.CORNER_LOW)
    if t >= hi:
        return _corner(problem, k_hi, TiltStatus.CORNER_HIGH)

    # centre on the target: the root is where the tilted mean of x is 0
    x = (w[active] - t) / WAGE_SCALE
    log_q = np.log(q[active])
    denom = abs(t) if t != 0 else (hi - lo)
    xtol = tol * denom / WAGE_SCALE

    it = 0
    theta = 0.0
    p, m, v = _tilt(log_q, x, theta)
    if abs(m) > xtol:
        # bracket [a, b] with m(a) < 0 < m(b)
        direction = 1.0 if m < 0 else -1.0
        inner, step = 0.0, 1.0
        while True:
            it += 1
            if it > max_iter:
                raise NonConvergence(f"could not bracket the tilt root within {max_iter} iterations")
            outer = inner + direction * step
            p, m, v = _tilt(log_q, x, outer)
            if abs(m) <= xtol:
                theta = outer
                break
            if (m > 0) == (direction > 0):
                break
            inner, step = outer, 2.0 * step
        if abs(m) > xtol:
            a, b = (inner, outer) if direction > 0 else (outer, inner)
            theta = outer
            while True:
                it += 1
                if it > max_iter:
                    raise NonConvergence(
                        f"tilt root not found within {max_iter} iterations "
                        f"(residual {m * WAGE_SCALE:.3g} euros)"
                    )
                nxt = theta - m / v if v > 0 else np.nan
                if not (a < nxt < b):
                    nxt = 0.5 * (a + b)
                if nxt == theta or b - a <= 4 * np.finfo(float).eps * max(abs(a), abs(b), 1.0):
                    raise NonConvergence(
                        f"tilt bracket collapsed before reaching tolerance (residual {m * WAGE_SCALE:.3g} euros)"
                    )
                theta = nxt
                p, m, v = _tilt(log_q, x, theta)
                if abs(m) <= xtol:
                    break
                if m < 0:
                    a = theta
                else:
                    b = theta

    post = np.zeros_like(q)
    post[active] = p
    return TiltSolution(
        lam=theta / WAGE_SCALE,
        posterior=post,
        achieved_mean=float(post @ w),
        kl_divergence=float(rel_entr(post, q).sum()),
        status=TiltStatus.INTERIOR,
        iterations=it,
    )


# ---------------------------------------------------------------------------
# Priors, tiers and cell imputation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TiltPrior:
    """Support and prior probabilities taken from one regional distribution.

    ``support`` is in the distribution's own (nominal) euros; dividing by
    ``price_index`` gives constant base-year euros.
    """

    support: np.ndarray
    prior: np.ndarray
    region: str = ""
    year: int = 0
    price_index: float = 1.0

    @property
    def real_support(self) -> np.ndarray:
        return self.support / self.price_index

    def problem(self, target_mean: float) -> TiltProblem:
        return TiltProblem(self.support, self.prior, target_mean)


def build_prior(regional: GroupedDistribution, deflator: Deflator | None = None) -> TiltPrior:
    """Bracket representative wages (implied mean, or midpoint when empty)
    with employment shares as prior probabilities."""
    e = regional.employees
    total = e.sum()
    if not total > 0:
        raise EmptyDistribution(f"distribution ({regional.region}, {regional.year}) has no employees")
    support = regional.scheme.midpoints.copy()
    pos = e > 0
    support[pos] = regional.wage_mass[pos] / e[pos]
    if np.any(np.diff(support) <= 0):
        k = int(np.flatnonzero(np.diff(support) <= 0)[0])
        raise InvalidDistribution(
            f"distribution ({regional.region}, {regional.year}): brackets {k} and {k + 1} "
            "have coinciding representative wages"
        )
    prior = e / total
    index = deflator.index(regional.year) if deflator is not None else 1.0
    return TiltPrior(support, prior, regional.region, regional.year, index)


@dataclass(frozen=True)
class TierScheme:
    """Four wage tiers in constant euros: T1 = [0, c1], T2 = (c1, c2],
    T3 = (c2, c3], T4 = (c3, inf)."""

    thresholds: tuple[float, float, float]
    labels: tuple[str, str, str, str] = ("T1", "T2", "T3", "T4")
    affected: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        th = tuple(float(v) for v in self.thresholds)
        if len(th) != 3 or not (0 < th[0] < th[1] < th[2]):
            raise ValidationError(f"tier thresholds must be 3 strictly increasing positive values, got {th}")
        if len(self.labels) != 4:
            raise ValidationError("need exactly four tier labels")
        object.__setattr__(self, "thresholds", th)

    @classmethod
    def from_smi(cls, smi_pre: float, smi_post: float) -> "TierScheme":
        """Default tiers: up to the old minimum, up to the new minimum,
        up to twice the new minimum, above."""
        return cls((float(smi_pre), float(smi_post), 2.0 * float(smi_post)))

    def assign(self, wages) -> np.ndarray:
        return np.searchsorted(np.asarray(self.thresholds), np.asarray(wages, dtype=float), side="left")

    def affected_mask(self, wages) -> np.ndarray:
        return np.isin(self.assign(wages), self.affected)


@dataclass(frozen=True, eq=False)
class ImputedCell:
    cell: CellAggregate
    solution: TiltSolution | None
    support: np.ndarray
    real_support: np.ndarray
    tier_index: np.ndarray
    employees_by_bracket: np.ndarray
    wage_bill_by_bracket: np.ndarray
    employees_by_tier: np.ndarray
    wage_bill_by_tier: np.ndarray
    rescale_factor: float = 1.0

    @property
    def key(self) -> tuple:
        return self.cell.key

    @property
    def employee_error(self) -> float:
        return _rel_err(self.employees_by_bracket.sum(), self.cell.employees)

    @property
    def wage_bill_error(self) -> float:
        return _rel_err(self.wage_bill_by_bracket.sum(), self.cell.wage_bill)


def _rel_err(got: float, want: float) -> float:
    got, want = float(got), float(want)
    if want == 0:
        return abs(got)
    return abs(got - want) / abs(want)


def impute_cell(cell: CellAggregate, prior: TiltPrior, tiers: TierScheme, tol: float = 1e-9) -> ImputedCell:
    """Allocate a cell's employees and wage bill over the wage grid.

    Employees follow the tilted probabilities; the wage bill follows
    ``employees * wage`` with one multiplicative correction so that it sums
    to the cell total.
    """
    if not cell.employees > 0:
        raise NoEmployment(f"cell {cell.key} has no employees")
    sol = solve_tilt(prior.problem(cell.mean_wage), tol=tol)
    emp = cell.employees * sol.posterior
    raw_bill = emp * prior.support
    total = raw_bill.sum()
    factor = cell.wage_bill / total if total > 0 else 1.0
    bill = raw_bill * factor
    return _finish(cell, sol, prior, tiers, emp, bill, float(factor))


def _finish(cell, sol, prior, tiers, emp, bill, factor) -> ImputedCell:
    real = prior.real_support
    tier = tiers.assign(real)
    return ImputedCell(
        cell=cell,
        solution=sol,
        support=prior.support,
        real_support=real,
        tier_index=tier,
        employees_by_bracket=emp,
        wage_bill_by_bracket=bill,
        employees_by_tier=np.bincount(tier, weights=emp, minlength=4),
        wage_bill_by_tier=np.bincount(tier, weights=bill, minlength=4),
        rescale_factor=factor,
    )


def impute_cells(
    cells: Iterable[CellAggregate],
    distributions: Iterable[GroupedDistribution],
    tiers: TierScheme,
    deflator: Deflator | None = None,
    tol: float = 1e-9,
    threads: int = 1,
) -> list[ImputedCell]:
    """Impute every cell against its region-year prior.

    Output order follows input order regardless of ``threads``; empty cells
    get an all-zero allocation.
    """
    cells = list(cells)
    priors = {}
    for g in distributions:
        priors[(g.region, g.year)] = g
    built = {}

    def prior_for(cell):
        key = (cell.region, cell.year)
        if key not in built:
            if key not in priors:
                raise IndexMismatch(f"no regional distribution for region {cell.region!r}, year {cell.year}")
            built[key] = build_prior(priors[key], deflator)
        return built[key]

    # priors are built serially so workers only read shared state
    jobs = [(c, prior_for(c)) for c in cells]

    def run(job):
        cell, prior = job
        if cell.employees == 0 and cell.wage_bill == 0:
            n = prior.support.size
            return _finish(cell, None, prior, tiers, np.zeros(n), np.zeros(n), 1.0)
        return impute_cell(cell, prior, tiers, tol)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(run, jobs))
    return [run(j) for j in jobs]


@dataclass
class ClosureReport:
    n_cells: int
    max_employee_error: float
    max_wage_bill_error: float
    worst_cell: tuple | None
    failing: list = field(default_factory=list)
    threshold: float = CLOSURE_THRESHOLD

    @property
    def max_error(self) -> float:
        return max(self.max_employee_error, self.max_wage_bill_error)

    @property
    def passed(self) -> bool:
        return not self.failing

    def to_dict(self) -> dict:
        return {
            "n_cells": self.n_cells,
            "max_employee_error": self.max_employee_error,
            "max_wage_bill_error": self.max_wage_bill_error,
            "max_error": self.max_error,
            "worst_cell": list(self.worst_cell) if self.worst_cell else None,
            "failing": [list(k) for k in self.failing],
            "threshold": self.threshold,
            "passed": self.passed,
        }


def validate_closure(
    imputed: Sequence[ImputedCell],
    cells: Sequence[CellAggregate],
    threshold: float = CLOSURE_THRESHOLD,
) -> ClosureReport:
    """Compare imputed bracket sums with the administrative cell totals."""
    by_key = {c.key: c for c in cells}
    imp_keys = [ic.key for ic in imputed]
    if set(imp_keys) != set(by_key) or len(imp_keys) != len(by_key):
        extra = sorted(set(imp_keys) - set(by_key), key=str)[:3]
        lost = sorted(set(by_key) - set(imp_keys), key=str)[:3]
        raise IndexMismatch(f"imputed and administrative cells differ (extra {extra}, missing {lost})")
    max_e = max_w = 0.0
    worst, worst_err = None, -1.0
    failing = []
    for ic in imputed:
        c = by_key[ic.key]
        ee = _rel_err(ic.employees_by_bracket.sum(), c.employees)
        ew = _rel_err(ic.wage_bill_by_bracket.sum(), c.wage_bill)
        max_e, max_w = max(max_e, ee), max(max_w, ew)
        if max(ee, ew) > worst_err:
            worst, worst_err = ic.key, max(ee, ew)
        if not max(ee, ew) < threshold:
            failing.append(ic.key)
    return ClosureReport(len(imputed), max_e, max_w, worst, failing, threshold)


DIAGNOSTIC_COLUMNS = (
    "region", "sector", "age_group", "year", "lambda", "status", "target_mean",
    "achieved_mean", "kl_divergence", "employee_error", "wage_bill_error", "rescale_factor",
)


def diagnostics_rows(imputed: Iterable[ImputedCell]) -> list[dict]:
    rows = []
    for ic in imputed:
        sol = ic.solution
        rows.append({
            "region": ic.cell.region,
            "sector": ic.cell.sector,
            "age_group": ic.cell.age_group,
            "year": ic.cell.year,
            "lambda": sol.lam if sol else 0.0,
            "status": sol.status.value if sol else "Empty",
            "target_mean": ic.cell.mean_wage if ic.cell.employees > 0 else 0.0,
            "achieved_mean": sol.achieved_mean if sol else 0.0,
            "kl_divergence": sol.kl_divergence if sol else 0.0,
            "employee_error": ic.employee_error,
            "wage_bill_error": ic.wage_bill_error,
            "rescale_factor": ic.rescale_factor,
        })
    return rows


def write_diagnostics(imputed: Iterable[ImputedCell], path, header_comment: str | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, DIAGNOSTIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in diagnostics_rows(imputed):
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
