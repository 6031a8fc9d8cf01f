"""Exception hierarchy.

Validation problems (bad inputs, broken invariants) derive from
``ValidationError``; numerical failures during estimation derive from
``EstimationError``. The CLI maps the two families to exit codes 2 and 3.
"""

from __future__ import annotations


class BitekitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ValidationError(BitekitError, ValueError):
    exit_code = 2


class EstimationError(BitekitError, ArithmeticError):
    exit_code = 3


# -- ingest ---------------------------------------------------------------
class MissingColumn(ValidationError):
    pass


class NonMonotoneBrackets(ValidationError):
    pass


class NegativeCount(ValidationError):
    pass


class UnmappedCode(ValidationError):
    pass


class UnknownYear(ValidationError):
    pass


class InvalidDistribution(ValidationError):
    pass


class UnbalancedPanel(ValidationError):
    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = list(missing)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["missing"] = [list(m) if isinstance(m, tuple) else m for m in self.missing]
        return d


# -- dist -----------------------------------------------------------------
class EmptyDistribution(ValidationError):
    pass


class ZeroWageMass(ValidationError):
    pass


class NonpositiveMeanWage(ValidationError):
    pass


# -- tilt -----------------------------------------------------------------
class InfeasibleTarget(ValidationError):
    pass


class NonConvergence(EstimationError):
    pass


class IndexMismatch(ValidationError):
    pass


# -- bite -----------------------------------------------------------------
class NoYoungEmployment(ValidationError):
    pass


class ZeroWageBill(ValidationError):
    pass


class NoEmployment(ValidationError):
    pass


class MissingPrePeriod(ValidationError):
    pass


class InsufficientUnits(ValidationError):
    pass


# -- fe / honest ----------------------------------------------------------
class RankDeficient(EstimationError):
    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = list(columns)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["columns"] = self.columns
        return d


class ExposureMissing(ValidationError):
    pass


class SingleCluster(EstimationError):
    pass


class SingularSubmatrix(EstimationError):
    pass


class MissingTarget(ValidationError):
    pass


class NoPrePeriods(ValidationError):
    pass


# -- synth / cli ----------------------------------------------------------
class InvalidSpec(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class MissingFit(ValidationError):
    pass


class MissingArtifacts(ValidationError):
    pass
