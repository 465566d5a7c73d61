"""Exception types shared across the package.

Conditions that the callers are expected to branch on (budget overruns,
non-returning critical orbits, ...) are reported as flags or statuses on
result objects instead; only contract violations raise.
"""


class NestlabError(Exception):
    """Base class for all package errors."""


# numerics
class NoSignChange(NestlabError):
    """Bracket does not certify a sign change."""


class MaxIterations(NestlabError):
    """Iteration budget hit before the requested tolerance was reached."""


# maps
class OutOfDomain(NestlabError):
    """Point outside the map's dynamical interval."""


class AtCriticalPoint(NestlabError):
    """Operation undefined at (or too close to) the critical point."""


class EscapedDomain(NestlabError):
    """An orbit left the dynamical interval; the instance is not a valid map."""


# nest
class NoFixedPoint(NestlabError):
    """No orientation-reversing fixed point bracket; typically an attracting
    interior fixed point is reached first (run regular detection instead)."""


class MaxSteps(NestlabError):
    """Landing walk exceeded its step budget."""


class CriticalNonReturning(NestlabError):
    """The critical point never re-enters the level within the budget, so
    there is no deeper level to extend into (Misiurewicz-type maps)."""


class EscapesEnumeratedBranches(NestlabError):
    """A landing walk stepped into a branch that could not be located."""


# stats
class CriticalOrbitPeriodic(NestlabError):
    """Critical orbit hits 0 again (superattracting); derivative products vanish."""

    def __init__(self, first_zero: int):
        self.first_zero = first_zero
        super().__init__(f"critical orbit returns to 0 at iterate {first_zero}")


class InsufficientBranches(NestlabError):
    """Not enough enumerated branches to run the requested diagnostic."""


class InsufficientDepth(NestlabError):
    """A taxonomy clause references nest data beyond the built levels."""


class NoSegments(NestlabError):
    """Every sampled orbit enters the excluded neighbourhood immediately."""


# transversality
class ZeroDerivative(NestlabError):
    """Df^k vanished along the critical orbit; the series is undefined."""

    def __init__(self, k: int):
        self.k = k
        super().__init__(f"zero derivative along critical orbit at iterate {k}")


class NotSummable(NestlabError):
    """The derivative-reciprocal series shows no geometric tail."""


class BumpInfeasible(NestlabError):
    """No polynomial within the degree cap meets the bump constraints."""


# kneading
class NeutralSuspected(NestlabError):
    """Cycle multiplier within tolerance of 1 in absolute value."""

    def __init__(self, period: int, multiplier: float):
        self.period = period
        self.multiplier = multiplier
        super().__init__(
            f"suspected neutral cycle: period {period}, multiplier {multiplier!r}"
        )


class TruncatedByC(NestlabError):
    """Kneading comparison stopped by a C symbol (superattracting hit)."""


# scan
class SignatureUnstable(NestlabError):
    """Base-parameter combinatorics signature could not be recomputed reliably."""


class IOFailure(NestlabError):
    """Persistence failed (lock held, unwritable path, malformed resume file)."""
