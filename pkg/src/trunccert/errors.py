"""Exception hierarchy.

Configuration and model errors derive from :class:`ModelError` (CLI exit 2);
numerical and domain errors derive from :class:`NumericalError` (CLI exit 4).
"""

from __future__ import annotations


class TruncCertError(Exception):
    """Base class for all library errors."""


class ModelError(TruncCertError, ValueError):
    """Invalid model, payoff, domain or config."""


class RowSumViolation(ModelError):
    def __init__(self, row: int, total: float):
        self.row = row
        self.total = total
        super().__init__(f"generator row {row} sums to {total:.3e}, expected 0")


class NegativeOffDiagonal(ModelError):
    def __init__(self, row: int, col: int, value: float):
        self.row = row
        self.col = col
        super().__init__(f"generator entry ({row},{col}) = {value} is negative")


class SingularVolatility(ModelError):
    def __init__(self, regime: int, cond: float):
        self.regime = regime
        self.cond = cond
        super().__init__(f"volatility matrix of regime {regime} is singular (cond={cond:.3e})")


class NegativeRate(ModelError):
    def __init__(self, regime: int, value: float):
        self.regime = regime
        super().__init__(f"rate of regime {regime} is negative ({value})")


class UnboundedPayoff(ModelError):
    pass


class NonPositivePrice(ModelError):
    pass


class NumericalError(TruncCertError):
    """Solver, quadrature or domain failure."""


class DegenerateTime(NumericalError):
    pass


class NonPositiveCoordinate(NumericalError):
    pass


class QuadratureDivergence(NumericalError):
    pass


class QuadratureDimension(NumericalError):
    pass


class CholeskyFailure(NumericalError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, achieved: float, iterations: int):
        self.achieved = achieved
        self.iterations = iterations
        super().__init__(f"no convergence after {iterations} iterations (last diff {achieved:.3e})")


class LinearSolveFailure(NumericalError):
    def __init__(self, step: int, cond: float):
        self.step = step
        self.cond = cond
        super().__init__(f"linear solve failed at step {step} (cond estimate {cond:.3e})")


class ProbeOutsideDomain(NumericalError):
    pass


class AnchorInfeasible(NumericalError):
    pass


class InvalidSupersolution(NumericalError):
    pass


class ToleranceUnreachable(NumericalError):
    def __init__(self, achieved: float, tolerance: float):
        self.achieved = achieved
        self.tolerance = tolerance
        super().__init__(f"bound {achieved:.3e} above tolerance {tolerance:.3e} at bracket cap")


class CertificationViolated(TruncCertError):
    """Measured truncation error exceeded the certified bound."""


class CFLWarning(UserWarning):
    pass
