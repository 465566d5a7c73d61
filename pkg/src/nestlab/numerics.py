"""Arithmetic substrate: working precision, certified bisection and
log-space derivative products.

Everything downstream funnels derivative accumulation and root finding
through this module so that overflow handling and precision overrides live
in one place.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import mpmath

from .errors import MaxIterations, NoSignChange

DOUBLE_BITS = 53


@dataclass(frozen=True)
class Precision:
    """Working mantissa width.  53 bits means hardware doubles; anything
    wider switches the scalar code paths to mpmath reals."""

    mantissa_bits: int = DOUBLE_BITS

    def __post_init__(self):
        if not (DOUBLE_BITS <= self.mantissa_bits <= 1024):
            raise ValueError("mantissa_bits must be in [53, 1024]")

    @property
    def epsilon(self) -> float:
        # unit roundoff of the working format
        return math.ldexp(1.0, 1 - self.mantissa_bits)

    @property
    def is_double(self) -> bool:
        return self.mantissa_bits == DOUBLE_BITS

    def real(self, x):
        """Convert to the working scalar type."""
        if self.is_double:
            return float(x)
        with mpmath.workprec(self.mantissa_bits):
            return mpmath.mpf(x)

    @contextmanager
    def active(self):
        """Context under which mpmath arithmetic rounds at this width."""
        if self.is_double:
            yield
        else:
            with mpmath.workprec(self.mantissa_bits):
                yield


DOUBLE = Precision()


def sign(x) -> int:
    if x > 0:
        return 1
    if x < 0:
        return -1
    return 0


@dataclass(frozen=True)
class Bracket:
    """Interval with a certified sign change of some function."""

    lo: float
    hi: float
    f_lo_sign: int
    f_hi_sign: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise NoSignChange(f"degenerate bracket [{self.lo}, {self.hi}]")
        if self.f_lo_sign == 0 or self.f_hi_sign == 0 or (
            self.f_lo_sign == self.f_hi_sign
        ):
            raise NoSignChange("endpoint signs do not certify a sign change")

    @classmethod
    def from_function(cls, g: Callable, lo, hi) -> "Bracket":
        return cls(lo, hi, sign(g(lo)), sign(g(hi)))


def bisect_root(
    g: Callable,
    bracket: Bracket,
    tol,
    precision: Precision = DOUBLE,
    max_iter: int = 20_000,
):
    """Root of g inside a certified bracket, located to width <= tol.

    Returns the midpoint of the final bracket.  Raises MaxIterations when
    the bracket stops shrinking above tol (tolerance unreachable at the
    working precision).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    with precision.active():
        lo = precision.real(bracket.lo)
        hi = precision.real(bracket.hi)
        s_lo = bracket.f_lo_sign
        for _ in range(max_iter):
            if hi - lo <= tol:
                return (lo + hi) / 2
            mid = (lo + hi) / 2
            if not (lo < mid < hi):
                raise MaxIterations(
                    f"bracket width {hi - lo!r} unresolvable below tol={tol!r} "
                    f"at {precision.mantissa_bits} bits"
                )
            s_mid = sign(g(mid))
            if s_mid == 0:
                return mid
            if s_mid == s_lo:
                lo = mid
            else:
                hi = mid
        raise MaxIterations(f"no convergence to tol={tol!r} in {max_iter} bisections")


NEG_INF = float("-inf")


@dataclass(frozen=True)
class LogProduct:
    """A product of reals kept as (log of absolute value, sign).

    sign 0 is absorbing and pins log_abs to -inf; it appears whenever a
    zero factor enters (legitimate at the critical point).
    """

    log_abs: float = 0.0
    sign: int = 1
    term_count: int = 0

    def times(self, factor) -> "LogProduct":
        if self.sign == 0:
            return LogProduct(NEG_INF, 0, self.term_count + 1)
        s = sign(factor)
        if s == 0:
            return LogProduct(NEG_INF, 0, self.term_count + 1)
        return LogProduct(
            self.log_abs + math.log(abs(float(factor))),
            self.sign * s,
            self.term_count + 1,
        )

    def extend(self, other: "LogProduct") -> "LogProduct":
        if self.sign == 0 or other.sign == 0:
            return LogProduct(NEG_INF, 0, self.term_count + other.term_count)
        return LogProduct(
            self.log_abs + other.log_abs,
            self.sign * other.sign,
            self.term_count + other.term_count,
        )

    @property
    def value(self) -> float:
        """The product itself; overflows to +-inf rather than raising."""
        if self.sign == 0:
            return 0.0
        try:
            return self.sign * math.exp(self.log_abs)
        except OverflowError:
            return self.sign * math.inf


def accumulate_log_derivative(factors: Iterable) -> LogProduct:
    """Product of the given factors in log form; empty product is +1."""
    acc = LogProduct()
    for x in factors:
        acc = acc.times(x)
    return acc


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(
    h: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12
) -> tuple[float, float]:
    """Golden-section descent for a scalar minimum on [lo, hi].

    Returns (argmin, min).  Intended as local refinement around a grid
    minimum, so no unimodality certificate is attempted.
    """
    a, b = float(lo), float(hi)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    hc, hd = h(c), h(d)
    while b - a > tol:
        if hc < hd:
            b, d, hd = d, c, hc
            c = b - _INVPHI * (b - a)
            hc = h(c)
        else:
            a, c, hc = c, d, hd
            d = a + _INVPHI * (b - a)
            hd = h(d)
    x = (a + b) / 2
    return x, h(x)


def minimum_on_grid(
    h: Callable[[float], float],
    lo: float,
    hi: float,
    grid: int,
    refine_tol: float = 1e-12,
) -> tuple[float, float]:
    """Minimum of h over [lo, hi]: grid scan plus golden-section refinement
    in the best grid cell.  Endpoints are always included."""
    if grid < 2:
        grid = 2
    xs = [lo + (hi - lo) * i / (grid - 1) for i in range(grid)]
    vals = [h(x) for x in xs]
    k = min(range(len(xs)), key=vals.__getitem__)
    best_x, best_v = xs[k], vals[k]
    a = xs[max(0, k - 1)]
    b = xs[min(len(xs) - 1, k + 1)]
    if b > a:
        x, v = golden_section_min(h, a, b, refine_tol)
        if v < best_v:
            best_x, best_v = x, v
    return best_x, best_v
