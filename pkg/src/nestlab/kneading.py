"""Symbolic layer: kneading sequences of the critical orbit, hyperbolic
attractor detection with certified multipliers, renormalization reporting,
finite-depth conjugacy checks, and straightening onto the quadratic family
by kneading bisection with optional multiplier refinement.

Kneading sequences are itineraries of the critical value orbit relative to
the critical point; comparisons use the signed lexicographic order in
which the ordering of symbols flips with the parity of orientation-
reversing (R) symbols seen so far, L < C < R at even parity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .errors import NeutralSuspected, NoFixedPoint, TruncatedByC
from .maps import MapInstance, derivative_along_orbit, make_instance
from .nest import restrictive_interval
from .numerics import Precision

SYMBOLS = ("L", "C", "R")


@dataclass(frozen=True)
class KneadingSequence:
    symbols: str  # itinerary of f(0): symbol k-1 describes f^k(0)
    depth: int
    periodic_suffix: Optional[tuple[int, int]] = None  # (start, period), 0-based
    truncated: bool = False  # a C symbol ended the sequence

    def __len__(self) -> int:
        return len(self.symbols)


def kneading_sequence(m: MapInstance, depth: int) -> KneadingSequence:
    """Symbols of f^k(0) for k = 1..depth; C (within tolerance of the
    critical point) stops the itinerary."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    sym_tol = 1e3 * m.precision.epsilon * max(1.0, m.halfwidth)
    jet = m.jet
    y = 0.0
    out = []
    truncated = False
    for _ in range(depth):
        y = jet(y)[0]
        fy = float(y)
        if abs(fy) <= sym_tol:
            out.append("C")
            truncated = True
            break
        out.append("R" if fy > 0 else "L")
    symbols = "".join(out)
    suffix = _detect_suffix(symbols) if not truncated else None
    return KneadingSequence(
        symbols=symbols, depth=depth, periodic_suffix=suffix, truncated=truncated
    )


def _detect_suffix(s: str) -> Optional[tuple[int, int]]:
    """Smallest (start, period) with s[i] == s[i+period] for all i >= start,
    requiring at least two full repetitions of the tail to be visible."""
    n = len(s)
    best = None
    for period in range(1, n // 2 + 1):
        start = n - period
        while start > 0 and s[start - 1] == s[start - 1 + period]:
            start -= 1
        if start <= n - 2 * period:
            if best is None or start < best[0] or (
                start == best[0] and period < best[1]
            ):
                best = (start, period)
    return best


def compare_kneading(s1: str, s2: str) -> tuple[int, int]:
    """Signed lexicographic comparison of two itineraries.

    Returns (sign, index): sign < 0 / > 0 when s1 precedes / follows s2 in
    the kneading order, 0 when the common prefix agrees; index is the
    1-based first difference (or the common length on agreement)."""
    order = {"L": 0, "C": 1, "R": 2}
    parity = 1
    n = min(len(s1), len(s2))
    for i in range(n):
        if s1[i] != s2[i]:
            raw = order[s1[i]] - order[s2[i]]
            return (parity * (1 if raw > 0 else -1), i + 1)
        if s1[i] == "R":
            parity = -parity
    return (0, n)


@dataclass(frozen=True)
class ConjugacyResult:
    kind: str  # agree | disagree | truncated
    depth: int  # agreement depth, or the 1-based disagreement position

    @property
    def agrees(self) -> bool:
        return self.kind == "agree"


def conjugacy_check(f: MapInstance, g: MapInstance, depth: int) -> ConjugacyResult:
    """Compare kneading prefixes to the requested depth.  A shared C symbol
    means the combinatorics cannot be extended past a superattracting hit
    (reported as `truncated` rather than agreement)."""
    k1 = kneading_sequence(f, depth).symbols
    k2 = kneading_sequence(g, depth).symbols
    n = min(len(k1), len(k2))
    for i in range(n):
        if k1[i] != k2[i]:
            return ConjugacyResult("disagree", i + 1)
        if k1[i] == "C":
            return ConjugacyResult("truncated", i + 1)
    if len(k1) != len(k2):
        # one itinerary stopped at C, the other continued
        return ConjugacyResult("disagree", n + 1)
    return ConjugacyResult("agree", n)


# ---------------------------------------------------------------------------
# regular (hyperbolic attractor) detection


@dataclass(frozen=True)
class RegularReport:
    period: int
    multiplier: float
    orbit: tuple[float, ...]
    basin_witness: int  # iterates until the critical orbit is trapped


def _polish_cycle(m: MapInstance, x0: float, p: int, cycle_tol: float):
    """Newton refinement of a period-p point from a seed; None on failure."""
    x = float(x0)
    H = m.halfwidth
    for _ in range(80):
        y = x
        dacc = 1.0
        for _ in range(p):
            fy, dy, _, _ = m.jet(y)
            dacc *= float(dy)
            y = float(fy)
        g = y - x
        dg = dacc - 1.0
        if abs(g) <= cycle_tol * max(1.0, abs(x)):
            return x
        if dg == 0.0 or not math.isfinite(dg):
            return None
        step = g / dg
        x_new = x - step
        if not (-H <= x_new <= H):
            return None
        if abs(step) < 1e-17 * max(1.0, abs(x)):
            return x_new
        x = x_new
    return None


def _cycle_multiplier(m: MapInstance, z: float, p: int) -> float:
    lp = derivative_along_orbit(m, z, p)
    return lp.value


def detect_regular(
    m: MapInstance,
    max_iter: int = 20_000,
    max_period: int = 512,
    cycle_tol: float = 1e-10,
    mult_tol: float = 1e-6,
) -> Optional[RegularReport]:
    """Find a hyperbolic periodic attractor by following the critical
    orbit (which converges to any attracting cycle), then certify the
    cycle by Newton polish and a multiplier bound.

    Returns None when no near-periodic tail shows up within the budget.
    Raises NeutralSuspected when the polished multiplier sits within
    mult_tol of 1 in absolute value (certification re-runs at doubled
    precision first when marginal)."""
    if max_period > 1_000:
        raise ValueError("max_period capped at 1000")
    H = m.halfwidth
    sym_tol = 1e3 * m.precision.epsilon * max(1.0, H)
    jet = m.jet
    y = 0.0
    zero_hits = []
    window = max(4 * max_period, 64)
    tail: list[float] = []
    detect_at = None
    period = None
    for k in range(1, max_iter + 1):
        y = jet(y)[0]
        fy = float(y)
        if abs(fy) <= sym_tol:
            zero_hits.append(k)
            if len(zero_hits) >= 2:
                period = zero_hits[-1] - zero_hits[-2]
                detect_at = k
                break
            if len(zero_hits) == 1 and zero_hits[0] <= max_period:
                # superattracting candidate; wait for the second hit
                pass
        tail.append(fy)
        if len(tail) > window:
            tail.pop(0)
        if k >= window and k % window == 0:
            cand = _near_period(tail, max_period, 1e-8 * max(1.0, H))
            if cand is not None:
                period = cand
                detect_at = k
                break
    if period is None and len(zero_hits) == 1:
        period = zero_hits[0]
        detect_at = zero_hits[0]
    if period is None:
        cand = _near_period(tail, max_period, 1e-8 * max(1.0, H))
        if cand is None:
            return None
        period = cand
        detect_at = max_iter
    seed = float(tail[-1]) if tail else 0.0
    if zero_hits:
        seed = 0.0
    z = _polish_cycle(m, seed, period, cycle_tol)
    if z is None:
        return None
    # minimality: no proper divisor closes the cycle
    for q in range(1, period):
        if period % q == 0:
            yq = z
            for _ in range(q):
                yq = float(jet(yq)[0])
            if abs(yq - z) <= 10 * cycle_tol * max(1.0, abs(z)):
                period = q
                break
    mult = _cycle_multiplier(m, z, period)
    if abs(abs(mult) - 1.0) < 10 * mult_tol and m.precision.is_double:
        # marginal: re-certify at doubled precision
        m2 = make_instance(m.family_id, m.params, Precision(106))
        z2 = _polish_cycle(m2, z, period, cycle_tol * 1e-6)
        if z2 is not None:
            mult = float(_cycle_multiplier(m2, float(z2), period))
    if abs(mult) > 1.0 + mult_tol:
        # the critical orbit sits on a repelling cycle (preperiodic map):
        # there is no attractor to certify
        return None
    if abs(mult) >= 1.0 - mult_tol:
        raise NeutralSuspected(period, mult)
    orbit = [z]
    for _ in range(period - 1):
        orbit.append(float(jet(orbit[-1])[0]))
    return RegularReport(
        period=period,
        multiplier=mult,
        orbit=tuple(orbit),
        basin_witness=detect_at if detect_at is not None else max_iter,
    )


def _near_period(tail: list[float], max_period: int, tol: float) -> Optional[int]:
    n = len(tail)
    for p in range(1, min(max_period, n // 2) + 1):
        span = min(2 * p, n - p)
        if all(abs(tail[-1 - i] - tail[-1 - i - p]) <= tol for i in range(span)):
            return p
    return None


def detect_renormalization(
    m: MapInstance, max_period: int = 64
) -> Optional[tuple[int, tuple[float, float]]]:
    """First renormalization level in symbolic terms: (period, restrictive
    interval), or None for non-renormalizable maps.  Deeper levels follow
    by recursing on the return map (see nest.restrictive_interval, which
    reports the full certified chain)."""
    res = restrictive_interval(m, max_period=max_period)
    if not res.chain:
        return None
    q, p = res.chain[0]
    return (p, (-q, q))


# ---------------------------------------------------------------------------
# straightening


@dataclass(frozen=True)
class StraightenResult:
    a_star: float
    achieved_depth: int
    truncated_by_c: bool = False
    refined_by_multiplier: bool = False
    window: Optional[tuple[float, float]] = None
    period: Optional[int] = None
    multiplier: Optional[float] = None


def _quadratic_kneading(a: float, depth: int) -> str:
    q = make_instance("quadratic", (a,))
    return kneading_sequence(q, depth).symbols


A_LO, A_HI = -0.25, 2.0


def _kneading_bisect(target: str, depth: int, tol: float):
    """Parameter interval of the quadratic family matching the target
    itinerary prefix (kneading order is monotone in the parameter)."""
    lo, hi = A_LO, A_HI
    # the endpoints straddle every admissible sequence
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        ks = _quadratic_kneading(mid, depth)
        if ks and ks[-1] == "C" and len(ks) < depth:
            mid_adj = mid + (hi - lo) * 1e-9  # step off a superattracting hit
            ks = _quadratic_kneading(mid_adj, depth)
            mid = mid_adj
        cmp, _ = compare_kneading(ks, target)
        if cmp == 0:
            return lo, hi, mid, True
        if cmp < 0:
            lo = mid
        else:
            hi = mid
    return lo, hi, 0.5 * (lo + hi), False


def _window_multiplier(a: float, period: int, seed: float, cycle_tol: float):
    """Attracting cycle multiplier of q_a if a carries an attractor of
    exactly this minimal period; (None, seed') otherwise."""
    q = make_instance("quadratic", (a,))
    z = _polish_cycle(q, seed, period, cycle_tol)
    if z is None:
        return None, None
    # reject non-minimal cycles (a divisor closes the orbit: wrong window)
    jet = q.jet
    for d in range(1, period):
        if period % d == 0:
            y = z
            for _ in range(d):
                y = float(jet(y)[0])
            if abs(y - z) <= 1e4 * cycle_tol * max(1.0, abs(z)):
                return None, z
    mult = _cycle_multiplier(q, z, period)
    if not math.isfinite(mult) or abs(mult) >= 1.0:
        return None, z
    return mult, z


def _find_window_seed(a_mid: float, period: int, seed: float, target_kneading: str,
                      depth: int, bracket_width: float = 1e-3,
                      cycle_tol: float = 1e-12, grid: int = 512):
    """A parameter inside the hyperbolic window of the given minimal period
    whose kneading prefix is compatible with the target.

    Tries the kneading-bisected midpoint, then a dense sweep of its
    neighbourhood (kneading localizes narrow windows tightly, and wide
    windows survive the global fallback sweep).  Kneading flips across a
    window's superattracting centre, so compatibility is checked per
    candidate."""
    cmp_depth = min(depth, 48)

    def admissible(a):
        mm, _ = _window_multiplier(a, period, seed, cycle_tol)
        if mm is None:
            return False
        ks = _quadratic_kneading(a, cmp_depth)
        c, _ = compare_kneading(ks, target_kneading[:cmp_depth])
        return c == 0

    if admissible(a_mid):
        return a_mid
    W = max(8.0 * bracket_width, 1e-3)
    for lo_s, hi_s, n in (
        (max(A_LO, a_mid - W), min(A_HI, a_mid + W), 1024),
        (A_LO, A_HI, grid),
    ):
        best = None
        for k in range(n + 1):
            a = lo_s + (hi_s - lo_s) * k / n
            if admissible(a) and (best is None or abs(a - a_mid) < abs(best - a_mid)):
                best = a
        if best is not None:
            return best
    return None


def _refine_in_window(a0: float, period: int, seed: float, target_mult: float,
                      tol: float, cycle_tol: float = 1e-12):
    """Continue the attracting cycle through the hyperbolic window and
    bisect the multiplier (a homeomorphism onto (-1, 1)) to the target."""
    m0, z0 = _window_multiplier(a0, period, seed, cycle_tol)
    if m0 is None:
        return None

    def _expand(sign):
        # adaptive walk: double the step while the continuation holds, halve
        # it when stepping past the window edge
        a, mval, z = a0, m0, z0
        step = max(tol, 1e-6)
        for _ in range(200):
            if (mval - target_mult) * (m0 - target_mult) <= 0:
                break  # bracketed
            cand = min(A_HI, max(A_LO, a + sign * step))
            if cand == a:
                break
            mm, zz = _window_multiplier(cand, period, z, cycle_tol)
            if mm is None:
                step *= 0.5
                if step < max(tol * 0.5, 1e-15):
                    break
                continue
            a, mval, z = cand, mm, zz
            step *= 2.0
        return a, mval, z

    lo_a, lo_m, lo_z = _expand(-1.0)
    hi_a, hi_m, hi_z = _expand(+1.0)
    if (lo_m - target_mult) * (hi_m - target_mult) > 0:
        return None
    za, zb = lo_z, hi_z
    for _ in range(80):
        if hi_a - lo_a <= tol:
            break
        mid = 0.5 * (lo_a + hi_a)
        mm, zz = _window_multiplier(mid, period, 0.5 * (za + zb), cycle_tol)
        if mm is None:
            # stepped outside the window; shrink toward the seed side
            hi_a = mid
            continue
        if (mm - target_mult) * (lo_m - target_mult) > 0:
            lo_a, lo_m, za = mid, mm, zz
        else:
            hi_a, hi_m, zb = mid, mm, zz
    return 0.5 * (lo_a + hi_a), (lo_a, hi_a)


def straighten(
    f: MapInstance,
    depth: int = 96,
    tol: float = 1e-10,
    match_multiplier: bool = True,
    detect_budget: int = 60_000,
    max_period: int = 512,
) -> StraightenResult:
    """Quadratic parameter whose map shares f's combinatorics.

    Non-regular maps are located by bisection on the kneading order (the
    kneading sequence is monotone in the quadratic parameter).  For regular
    maps the kneading only pins down the hyperbolic window, so the
    attractor multiplier is bisected inside the window as a second pass;
    superattracting maps (C-truncated kneading) refine to multiplier 0,
    the window's centre, and carry a flag."""
    target = kneading_sequence(f, depth)
    reg = None
    try:
        reg = detect_regular(f, max_iter=detect_budget, max_period=max_period)
    except NeutralSuspected:
        reg = None
    lo, hi, a_mid, matched = _kneading_bisect(target.symbols, depth, max(tol, 1e-14))
    if reg is not None and match_multiplier:
        a_seed = _find_window_seed(
            a_mid, reg.period, reg.orbit[0], target.symbols, depth
        )
        refined = None
        if a_seed is not None:
            refined = _refine_in_window(
                a_seed, reg.period, reg.orbit[0], reg.multiplier, tol
            )
        if refined is not None:
            a_star, window = refined
            agree = conjugacy_check(
                f, make_instance("quadratic", (a_star,)), depth
            )
            return StraightenResult(
                a_star=a_star,
                achieved_depth=agree.depth,
                truncated_by_c=target.truncated,
                refined_by_multiplier=True,
                window=window,
                period=reg.period,
                multiplier=reg.multiplier,
            )
    # renormalizable combinatorics repeat symbols, so a fixed depth may
    # under-resolve: escalate until the bracket reaches tol
    d = depth
    while hi - lo > tol and not target.truncated and d < 8 * depth:
        d *= 2
        target = kneading_sequence(f, d)
        lo, hi, a_mid, matched = _kneading_bisect(target.symbols, d, max(tol, 1e-14))
        if target.truncated:
            break
    agree = conjugacy_check(f, make_instance("quadratic", (a_mid,)), depth)
    return StraightenResult(
        a_star=a_mid,
        achieved_depth=agree.depth,
        truncated_by_c=target.truncated,
        refined_by_multiplier=False,
        window=(lo, hi) if matched else None,
    )
