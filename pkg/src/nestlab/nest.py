"""Principal nest construction: restrictive intervals, first-return branch
decomposition, landing words and per-level summary data.

The nest is the sequence of symmetric intervals I_1 ⊃ I_2 ⊃ ... where
I_{n+1} is the central domain of the first return map R_n to I_n.  Branch
enumeration is necessarily partial: the working set is every monotone
branch of length >= min_branch_length plus every branch actually visited
by the critical orbit during construction.

Return times are always counted in iterates of the underlying map, also
for renormalizable maps (where they are multiples of the renormalization
period).
"""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    CriticalNonReturning,
    EscapesEnumeratedBranches,
    MaxSteps,
    NoFixedPoint,
)
from .maps import MapInstance, derivative_along_orbit
from .numerics import Bracket, LogProduct, bisect_root

RELIABLE = "reliable"
UNRELIABLE = "unreliable"


# ---------------------------------------------------------------------------
# result types


@dataclass(frozen=True)
class Branch:
    """One monotone first-return branch f^r : [lo, hi] -> I_n (onto)."""

    j: int
    lo: float
    hi: float
    r: int
    direction: int  # sign of DR on the branch
    endpoint_log_derivatives: tuple[LogProduct, LogProduct]

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    @property
    def distance_to_zero(self) -> float:
        if self.lo <= 0.0 <= self.hi:
            return 0.0
        return min(abs(self.lo), abs(self.hi))


@dataclass(frozen=True)
class LandingWord:
    """Branch itinerary of a point under R_n until it enters I_{n+1}."""

    word: tuple[int, ...]
    landing_time: int
    landing_domain: Optional[tuple[float, float]] = None
    truncated: Optional[str] = None  # EscapesEnumeratedBranches / MaxSteps

    def __len__(self) -> int:
        return len(self.word)


@dataclass(frozen=True)
class NestLevel:
    """Level n of the principal nest.

    The transition data (tau, v, s, c, tilde) describe the step to level
    n+1 and stay None until the level has been extended; `central` is the
    branch of the critical point (interval I_{n+1}, return time v_n).
    """

    n: int
    halfwidth: float
    branches: tuple[Branch, ...] = ()
    central: Optional[Branch] = None
    tau: Optional[int] = None
    v: Optional[int] = None
    s: Optional[int] = None
    c: Optional[float] = None
    tilde: Optional[tuple[float, float]] = None
    word0: Optional[tuple[int, ...]] = None
    is_central_level: Optional[bool] = None
    reliability: str = RELIABLE
    status: str = "ok"  # ok | critical_nonreturning | budget_exhausted
    complete_above: Optional[float] = None  # enumeration guarantee threshold

    @property
    def interval(self) -> tuple[float, float]:
        return (-self.halfwidth, self.halfwidth)

    @property
    def length(self) -> float:
        return 2.0 * self.halfwidth

    def branch(self, j: int) -> Branch:
        if j == 0:
            if self.central is None:
                raise KeyError("no central branch at this level")
            return self.central
        for b in self.branches:
            if b.j == j:
                return b
        raise KeyError(f"branch {j} not enumerated")

    def branch_containing(self, x: float) -> Optional[Branch]:
        if self.central is not None and self.central.contains(x):
            return self.central
        los = [b.lo for b in self.branches]
        k = bisect_right(los, x) - 1
        if k >= 0 and self.branches[k].contains(x):
            return self.branches[k]
        return None


@dataclass(frozen=True)
class BranchLimits:
    """Budgets for branch enumeration."""

    max_return_time: int = 512
    min_branch_length: Optional[float] = None  # absolute; None -> relative
    min_branch_length_rel: float = 1e-6
    max_branches: int = 20_000
    max_probes: int = 4_000_000
    boundary_tol_rel: float = 1e-13

    def min_length(self, halfwidth: float) -> float:
        if self.min_branch_length is not None:
            return self.min_branch_length
        return self.min_branch_length_rel * 2.0 * halfwidth


@dataclass(frozen=True)
class RestrictiveResult:
    halfwidth: float
    period: int
    chain: tuple[tuple[float, int], ...]  # certified (halfwidth, period), nested
    max_period_exceeded: bool = False

    @property
    def renormalizable(self) -> bool:
        return self.period > 1


@dataclass(frozen=True)
class NestResult:
    levels: tuple[NestLevel, ...]
    restrictive: RestrictiveResult
    status: str  # ok | no_fixed_point | critical_nonreturning | budget | unreliable
    central_level_count: int = 0

    @property
    def depth(self) -> int:
        return len(self.levels)


# ---------------------------------------------------------------------------
# first-return evaluation


def first_return_scalar(m: MapInstance, x: float, p: float, max_time: int):
    """First entry of the orbit of x into (-p, p): (time, sign DR, value),
    or None when the orbit does not come back within max_time."""
    H = m.halfwidth
    guard = H + 10 * m.precision.epsilon * max(1.0, H)
    jet = m.jet
    y = x
    sgn = 1
    for t in range(1, max_time + 1):
        y, d, _, _ = jet(y)
        if d < 0:
            sgn = -sgn
        elif d == 0:
            sgn = 0
        if -p < y < p:
            return (t, sgn, y)
        if abs(y) > guard:
            return None
    return None


def first_return_signature(m, x, p, max_time):
    res = first_return_scalar(m, x, p, max_time)
    if res is None:
        return None
    return (res[0], res[1])


def first_return_grid(m: MapInstance, xs: np.ndarray, p: float, max_time: int):
    """Vectorized first-return times over an array of points.

    Returns (t, d, ret): time (0 if not returned), sign of DR at return,
    and the return value.  Double precision only.
    """
    if not m.precision.is_double:
        out_t = np.zeros(len(xs), dtype=np.int64)
        out_d = np.zeros(len(xs), dtype=np.int8)
        out_r = np.zeros(len(xs))
        for i, x in enumerate(xs):
            res = first_return_scalar(m, float(x), p, max_time)
            if res is not None:
                out_t[i], out_d[i], out_r[i] = res
        return out_t, out_d, out_r
    n = len(xs)
    t_out = np.zeros(n, dtype=np.int64)
    d_out = np.zeros(n, dtype=np.int8)
    r_out = np.zeros(n, dtype=np.float64)
    idx = np.arange(n)
    y = np.asarray(xs, dtype=np.float64).copy()
    sgn = np.ones(n, dtype=np.int8)
    H = m.halfwidth
    guard = H + 10 * m.precision.epsilon * max(1.0, H)
    f_np, df_np = m.f_np, m.df_np
    for step in range(1, max_time + 1):
        sgn = (sgn * np.sign(df_np(y))).astype(np.int8)
        y = f_np(y)
        inside = (y > -p) & (y < p)
        if inside.any():
            hit = idx[inside]
            t_out[hit] = step
            d_out[hit] = sgn[inside]
            r_out[hit] = y[inside]
        keep = ~(inside | (np.abs(y) > guard))
        if not keep.all():
            idx = idx[keep]
            y = y[keep]
            sgn = sgn[keep]
            if idx.size == 0:
                break
    return t_out, d_out, r_out


def _iterate_n(m: MapInstance, x, n: int):
    jet = m.jet
    y = x
    for _ in range(n):
        y = jet(y)[0]
    return y


def _iterate_batch(m: MapInstance, xs: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """f^{steps[i]}(xs[i]) for per-point step counts, vectorized."""
    out = xs.astype(np.float64).copy()
    idx = np.flatnonzero(steps > 0)
    y = out[idx]
    st = steps[idx]
    f_np = m.f_np
    kmax = int(st.max()) if idx.size else 0
    for k in range(1, kmax + 1):
        y = f_np(y)
        hit = st == k
        if hit.any():
            out[idx[hit]] = y[hit]
        keep = st > k
        if not keep.all():
            idx, y, st = idx[keep], y[keep], st[keep]
            if idx.size == 0:
                break
    return out


def _derivative_batch(m: MapInstance, xs: np.ndarray, steps: np.ndarray):
    """log|Df^{steps[i]}(xs[i])| and its sign, vectorized."""
    n = len(xs)
    log_out = np.zeros(n)
    sgn_out = np.ones(n, dtype=np.int8)
    idx = np.flatnonzero(steps > 0)
    y = xs.astype(np.float64)[idx].copy()
    st = steps[idx]
    acc_log = np.zeros(idx.size)
    acc_sgn = np.ones(idx.size, dtype=np.int8)
    f_np, df_np = m.f_np, m.df_np
    kmax = int(st.max()) if idx.size else 0
    with np.errstate(divide="ignore"):
        for k in range(1, kmax + 1):
            d = df_np(y)
            acc_log = acc_log + np.log(np.abs(d))
            acc_sgn = (acc_sgn * np.sign(d)).astype(np.int8)
            y = f_np(y)
            hit = st == k
            if hit.any():
                log_out[idx[hit]] = acc_log[hit]
                sgn_out[idx[hit]] = acc_sgn[hit]
            keep = st > k
            if not keep.all():
                idx, y, st = idx[keep], y[keep], st[keep]
                acc_log, acc_sgn = acc_log[keep], acc_sgn[keep]
                if idx.size == 0:
                    break
    return log_out, sgn_out


def _bisect_signature_batch(m, p, a, b, t_sig, d_sig, tol):
    """Vectorized signature-boundary bisection: a inside, b outside."""
    a = a.copy()
    b = b.copy()
    budget = int(t_sig.max()) if len(t_sig) else 0
    for _ in range(80):
        if np.abs(b - a).max() <= tol:
            break
        mid = 0.5 * (a + b)
        t, d, _ = first_return_grid(m, mid, p, budget)
        match = (t == t_sig) & (d == d_sig)
        a = np.where(match, mid, a)
        b = np.where(match, b, mid)
    return a


def _polish_batch(m, xs, steps, targets, span0):
    """Vectorized endpoint polish: roots of f^steps(x) = target near xs."""
    xs = xs.astype(np.float64)
    res = xs.copy()
    span = np.full(len(xs), span0)
    lo = xs - span
    hi = xs + span
    for _ in range(8):
        glo = np.sign(_iterate_batch(m, lo, steps) - targets)
        ghi = np.sign(_iterate_batch(m, hi, steps) - targets)
        ok = glo * ghi < 0
        if ok.all():
            break
        span = np.where(ok, span, span * 8.0)
        lo = np.where(ok, lo, xs - span)
        hi = np.where(ok, hi, xs + span)
    else:
        ok = np.sign(_iterate_batch(m, lo, steps) - targets) * np.sign(
            _iterate_batch(m, hi, steps) - targets
        ) < 0
    sel = np.flatnonzero(ok)
    if sel.size == 0:
        return res
    lo_s, hi_s = lo[sel], hi[sel]
    st_s, tg_s = steps[sel], targets[sel]
    slo = np.sign(_iterate_batch(m, lo_s, st_s) - tg_s)
    for _ in range(64):
        mid = 0.5 * (lo_s + hi_s)
        gm = np.sign(_iterate_batch(m, mid, st_s) - tg_s)
        left = gm == slo
        lo_s = np.where(left, mid, lo_s)
        hi_s = np.where(left, hi_s, mid)
        if np.abs(hi_s - lo_s).max() <= 1e-17 * max(1.0, float(np.abs(xs).max())):
            break
    res[sel] = 0.5 * (lo_s + hi_s)
    return res


# ---------------------------------------------------------------------------
# restrictive interval (renormalization) search


def _fixed_point_candidates(m, period, lo, hi, grid):
    """Boundary candidates for a symmetric period-`period` interval: roots
    of f^period(x) -+ x on (lo, hi).  Both orientations occur: the boundary
    of a restrictive interval is mapped either to itself or to its mirror,
    depending on whether the renormalized map has a maximum or a minimum
    at the centre."""
    if not m.precision.is_double:
        xs = np.array([lo + (hi - lo) * i / (grid - 1) for i in range(grid)])
        y = np.array([float(_iterate_n(m, float(x), period)) for x in xs])
    else:
        xs = np.linspace(lo, hi, grid)
        y = xs.copy()
        for _ in range(period):
            y = m.f_np(y)
    roots = []
    tol = 1e-14 * max(1.0, m.halfwidth)
    for s in (-1.0, +1.0):
        vals = y + s * xs  # roots of f^p(x) = -s*x
        sgn = np.sign(vals)
        flips = np.flatnonzero(sgn[:-1] * sgn[1:] < 0)
        g = lambda x, s=s: _iterate_n(m, x, period) + s * x
        for k in flips:
            try:
                b = Bracket.from_function(g, float(xs[k]), float(xs[k + 1]))
            except Exception:
                continue
            roots.append(float(bisect_root(g, b, tol)))
    return roots


def _certify_restrictive(m, q, period):
    """Check that T = [-q, q] is periodic of (exact) period `period` with
    pairwise disjoint interval interiors and the critical orbit inside."""
    H = m.halfwidth
    tol = 1e-10 * max(1.0, H)
    jet = m.jet
    # forward images of T; f is monotone on each provided 0 stays outside
    lo, hi = float(m(q)), float(m(0.0))
    if lo > hi:
        lo, hi = hi, lo
    images = []
    for _ in range(period - 1):
        if lo < -tol and hi > tol:
            return False  # image straddles the critical point
        if max(abs(lo), abs(hi)) > H + tol:
            return False
        images.append((lo, hi))
        a, b = float(jet(lo)[0]), float(jet(hi)[0])
        lo, hi = min(a, b), max(a, b)
    # final image must come back inside T: endpoints are f^p(q)=q and f^p(0)
    fp0 = _iterate_n(m, 0.0, period)
    if abs(fp0) > q + tol:
        return False
    # interiors disjoint: against T and pairwise
    ivs = [(-q, q)] + images
    for i in range(len(ivs)):
        for k in range(i + 1, len(ivs)):
            overlap = min(ivs[i][1], ivs[k][1]) - max(ivs[i][0], ivs[k][0])
            if overlap > tol:
                return False
    return True


def _residue_spans_disjoint(orbit, p) -> bool:
    """Necessary condition for a period-p restrictive interval: the orbit of
    0 visits the interval cycle in order, so points with indices in the same
    residue class mod p span pairwise disjoint intervals."""
    n = len(orbit)
    if n < 2 * p:
        return True  # not enough data to reject
    spans = []
    for r in range(p):
        pts = orbit[r::p]
        spans.append((min(pts), max(pts)))
    spans.sort()
    for k in range(len(spans) - 1):
        if spans[k][1] > spans[k + 1][0]:
            return False
    return True


def restrictive_interval(
    m: MapInstance, max_period: int = 64, grid: int = 512
) -> RestrictiveResult:
    """Smallest certified symmetric periodic interval, found by recursing
    on renormalization levels; (I, 1) when none exists within max_period."""
    if max_period < 1:
        raise ValueError("max_period must be >= 1")
    H = m.halfwidth
    # orbit of 0 used for the cheap residue-class rejection test
    orbit = [0.0]
    jet = m.jet
    guard = H + 10 * m.precision.epsilon * max(1.0, H)
    y = 0.0
    for _ in range(max(8 * max_period, 64)):
        y = jet(y)[0]
        if abs(y) > guard:
            break
        orbit.append(float(y))
    chain: list[tuple[float, int]] = []
    q_cur, m_cur = H, 1

    def _search(p, q_bound):
        if not _residue_spans_disjoint(orbit, p):
            return None
        lo = q_bound * 1e-9
        hi = q_bound * (1 - 1e-9)
        for q in sorted(_fixed_point_candidates(m, p, lo, hi, grid), reverse=True):
            if _certify_restrictive(m, q, p):
                return (q, p)
        return None

    while True:
        found = None
        mult = 2
        while m_cur * mult <= max_period:
            found = _search(m_cur * mult, q_cur)
            if found:
                break
            mult += 1
            if mult > 4 and m_cur > 1:
                break  # deeper renormalizations come in small multiples
        if not found:
            break
        chain.append(found)
        q_cur, m_cur = found
    exceeded = False
    probe = 2 * m_cur
    if probe > max_period and _search(probe, q_cur):
        exceeded = True
    return RestrictiveResult(
        halfwidth=q_cur,
        period=m_cur,
        chain=tuple(chain),
        max_period_exceeded=exceeded,
    )


def first_nest_interval(m: MapInstance, halfwidth: float, period: int) -> float:
    """Halfwidth p of I_1 = [-p, p], with p the orientation-reversing fixed
    point of f^period on the restrictive interval."""
    q = float(halfwidth)
    fp = lambda x: _iterate_n(m, x, period)
    f0 = float(fp(0.0))
    # orientation of f^period at 0: rising on the positive side means the
    # renormalized map has a minimum at 0
    probe = q * 1e-3
    rising = float(fp(probe)) > f0
    qq = q * (1 - 1e-12)
    if rising:
        if not f0 < -1e3 * m.precision.epsilon * max(1.0, q):
            raise NoFixedPoint(
                "f^period(0) >= 0 with a minimum at 0: no orientation-reversing "
                "fixed point (attracting centre; run regular detection)"
            )
        g = lambda x: float(fp(x)) - x
        b = Bracket.from_function(g, -qq, 0.0 - q * 1e-15)
        root = float(bisect_root(g, b, 1e-15 * max(1.0, q)))
    else:
        if not f0 > 1e3 * m.precision.epsilon * max(1.0, q):
            raise NoFixedPoint(
                "f^period(0) <= 0 with a maximum at 0: no orientation-reversing "
                "fixed point (attracting centre; run regular detection)"
            )
        g = lambda x: float(fp(x)) - x
        try:
            b = Bracket.from_function(g, q * 1e-15, qq)
        except Exception as exc:
            raise NoFixedPoint(f"no sign change on (0, {q}): {exc}") from None
        root = float(bisect_root(g, b, 1e-15 * max(1.0, q)))
    der = derivative_along_orbit(m, root, period)
    if der.sign >= 0:
        raise NoFixedPoint(
            f"fixed point at {root!r} is orientation-preserving (Df^m sign "
            f"{der.sign}); no orientation-reversing fixed point found"
        )
    return abs(root)


# ---------------------------------------------------------------------------
# branch enumeration


class _LevelBuilder:
    """Mutable working state for one level; frozen into a NestLevel."""

    def __init__(self, m: MapInstance, n: int, halfwidth: float, limits: BranchLimits):
        self.m = m
        self.n = n
        self.p = float(halfwidth)
        self.limits = limits
        self.v: Optional[int] = None
        self.central_w: Optional[float] = None
        self.cands: list[tuple[float, float, int, int, tuple]] = []  # sorted by lo
        self._los: list[float] = []
        self.budget_exhausted = False
        self.complete_above: Optional[float] = None

    def add(self, cand) -> None:
        lo = cand[0]
        k = bisect_right(self._los, lo)
        # ignore duplicates (same branch rediscovered)
        if k > 0 and abs(self.cands[k - 1][0] - lo) < 1e-12 * max(1.0, self.p):
            return
        if k < len(self.cands) and abs(self.cands[k][0] - lo) < 1e-12 * max(1.0, self.p):
            return
        self.cands.insert(k, cand)
        self._los.insert(k, lo)

    def find(self, x: float):
        k = bisect_right(self._los, x) - 1
        if k >= 0:
            c = self.cands[k]
            if c[0] <= x <= c[1]:
                return c
        return None


def _polish_endpoint(m, r, x0, target, span):
    """Refine a branch endpoint by solving f^r(x) = target near x0."""
    g = lambda x: _iterate_n(m, x, r) - target
    h = span
    for _ in range(8):
        try:
            b = Bracket.from_function(g, x0 - h, x0 + h)
        except Exception:
            h *= 4.0
            continue
        return float(bisect_root(g, b, 1e-16 * max(1.0, abs(x0))))
    return x0


def _bisect_signature_boundary(m, p, max_time, x_in, x_out, sig):
    """Point where the first-return signature stops matching `sig`,
    approached from the inside."""
    a, b = x_in, x_out  # sig(a) == sig, sig(b) != sig
    # equality with sig is decidable within sig's own return time
    budget = min(max_time, sig[0]) if sig is not None else max_time
    for _ in range(80):
        if abs(b - a) <= 1e-14 * max(1.0, p):
            break
        mid = 0.5 * (a + b)
        if mid == a or mid == b:
            break
        if first_return_signature(m, mid, p, budget) == sig:
            a = mid
        else:
            b = mid
    return a


def _make_branch(m, lo, hi, r, d) -> tuple:
    dlo = derivative_along_orbit(m, lo, r)
    dhi = derivative_along_orbit(m, hi, r)
    return (lo, hi, r, d, (dlo, dhi))


def _locate_branch_at(m, p, x, max_time) -> Optional[tuple]:
    """On-demand discovery of the monotone branch containing x, regardless
    of its length.  None if x does not return within the budget."""
    sig = first_return_signature(m, x, p, max_time)
    if sig is None:
        return None
    t, d = sig
    span0 = 1e-9 * max(abs(x), 1e-3 * p)
    # expand outward until the signature changes, then bisect back
    edges = []
    for direction in (-1.0, 1.0):
        h = span0
        prev = x
        limit = p * (1 - 1e-15)
        while True:
            cand = x + direction * h
            if cand <= -limit or cand >= limit:
                cand = direction * limit
            if first_return_signature(m, cand, p, t) != sig:
                edge = _bisect_signature_boundary(m, p, max_time, prev, cand, sig)
                break
            prev = cand
            if abs(cand) >= limit:
                edge = cand
                break
            h *= 4.0
        edges.append(edge)
    lo, hi = min(edges), max(edges)
    # polish against the exact boundary images
    tgt_lo, tgt_hi = (-p, p) if d > 0 else (p, -p)
    span = max(1e-12 * p, 4.0 * abs(hi - lo) * 1e-10)
    lo = _polish_endpoint(m, t, lo, tgt_lo, span)
    hi = _polish_endpoint(m, t, hi, tgt_hi, span)
    if hi <= lo:
        return None
    return _make_branch(m, lo, hi, t, d)


def _enumerate_side(builder: _LevelBuilder, lo_excl: float) -> None:
    """Probe (lo_excl, p) for monotone branches; mirrors are added by the
    caller.  Probe spacing is half the minimum branch length, which
    guarantees every branch above the cutoff straddles a probe."""
    m, p, limits = builder.m, builder.p, builder.limits
    min_len = limits.min_length(builder.p)
    span = p * (1 - 1e-12) - lo_excl
    if span <= 0:
        return
    spacing = min_len / 2.0
    n_probes = int(span / spacing) + 1
    if n_probes > limits.max_probes:
        n_probes = limits.max_probes
        spacing = span / n_probes
        builder.budget_exhausted = True
        builder.complete_above = 2.0 * spacing
    else:
        builder.complete_above = min_len
    xs = lo_excl + spacing * (np.arange(n_probes) + 0.5)
    t, d, ret = first_return_grid(m, xs, p, limits.max_return_time)

    # split into runs of constant signature, then monotone sub-runs
    runs = []
    sig_change = np.flatnonzero((np.diff(t) != 0) | (np.diff(d) != 0))
    starts = np.concatenate(([0], sig_change + 1))
    ends = np.concatenate((sig_change, [len(xs) - 1]))
    for i0, i1 in zip(starts, ends):
        if t[i0] == 0 or d[i0] == 0:
            continue
        # an onto branch sweeps ret monotonically in the direction d; a
        # reversal marks two branches merged across an unresolved gap
        seg_ret = ret[i0 : i1 + 1]
        if len(seg_ret) > 1:
            steps = np.diff(seg_ret) * d[i0]
            breaks = np.flatnonzero(steps <= 0)
        else:
            breaks = np.array([], dtype=int)
        sub_bounds = [i0 + b for b in breaks.tolist()] if len(breaks) else []
        sub_starts = [i0] + [b + 1 for b in sub_bounds]
        sub_ends = sub_bounds + [i1]
        runs.extend(zip(sub_starts, sub_ends))
    if not runs:
        return
    if m.precision.is_double:
        _refine_runs_batch(builder, xs, t, d, runs, lo_excl, p)
    else:
        for s0, s1 in runs:
            _refine_run(builder, xs, t, d, s0, s1, lo_excl, p)


def _refine_runs_batch(builder, xs, t, d, runs, region_lo, region_hi):
    """Refine all candidate runs of a level in lockstep (double precision)."""
    m, p, limits = builder.m, builder.p, builder.limits
    n = len(runs)
    s0s = np.array([r[0] for r in runs])
    s1s = np.array([r[1] for r in runs])
    t_sig = t[s0s].astype(np.int64)
    d_sig = d[s0s].astype(np.int64)
    lo_in = xs[s0s]
    hi_in = xs[s1s]
    lo_out = np.where(s0s > 0, xs[np.maximum(s0s - 1, 0)], region_lo)
    hi_out = np.where(s1s + 1 < len(xs), xs[np.minimum(s1s + 1, len(xs) - 1)], region_hi)
    tol = 1e-14 * max(1.0, p)
    a = np.concatenate([lo_in, hi_in])
    b = np.concatenate([lo_out, hi_out])
    tt = np.concatenate([t_sig, t_sig])
    dd = np.concatenate([d_sig, d_sig])
    refined = _bisect_signature_batch(m, p, a, b, tt, dd, tol)
    lo_ref, hi_ref = refined[:n], refined[n:]
    # polish against the exact boundary images: increasing branches map
    # lo -> -p, hi -> +p; decreasing branches the other way round
    tgt_lo = np.where(d_sig > 0, -p, p)
    tgt_hi = np.where(d_sig > 0, p, -p)
    span0 = max(1e-13 * p, float(np.abs(np.concatenate([lo_ref, hi_ref])).max()) * 1e-12)
    lo_pol = _polish_batch(m, lo_ref, t_sig, tgt_lo, span0)
    hi_pol = _polish_batch(m, hi_ref, t_sig, tgt_hi, span0)
    min_len = limits.min_length(builder.p)
    keep = (hi_pol - lo_pol) >= min_len
    if not keep.any():
        return
    lo_k, hi_k = lo_pol[keep], hi_pol[keep]
    t_k, d_k = t_sig[keep], d_sig[keep]
    dlog, dsgn = _derivative_batch(
        m, np.concatenate([lo_k, hi_k]), np.concatenate([t_k, t_k])
    )
    nk = len(lo_k)
    for i in range(nk):
        lp_lo = LogProduct(float(dlog[i]), int(dsgn[i]), int(t_k[i]))
        lp_hi = LogProduct(float(dlog[nk + i]), int(dsgn[nk + i]), int(t_k[i]))
        builder.add(
            (float(lo_k[i]), float(hi_k[i]), int(t_k[i]), int(d_k[i]), (lp_lo, lp_hi))
        )


def _refine_run(builder, xs, t, d, s0, s1, region_lo, region_hi):
    m, p, limits = builder.m, builder.p, builder.limits
    sig = (int(t[s0]), int(d[s0]))
    x_left_out = xs[s0 - 1] if s0 > 0 else region_lo
    x_right_out = xs[s1 + 1] if s1 + 1 < len(xs) else region_hi
    lo = _bisect_signature_boundary(
        m, p, limits.max_return_time, xs[s0], x_left_out, sig
    )
    hi = _bisect_signature_boundary(
        m, p, limits.max_return_time, xs[s1], x_right_out, sig
    )
    if hi <= lo:
        return
    r, dd = sig
    tgt_lo, tgt_hi = (-p, p) if dd > 0 else (p, -p)
    span = max(1e-13 * p, 1e-9 * (hi - lo))
    lo = _polish_endpoint(m, r, lo, tgt_lo, span)
    hi = _polish_endpoint(m, r, hi, tgt_hi, span)
    if hi - lo < limits.min_length(builder.p):
        return
    builder.add(_make_branch(m, lo, hi, r, dd))


def _mirror_cand(c):
    lo, hi, r, d, (dlo, dhi) = c
    # evenness: f^r(-x) = f^r(x), DR(-x) = -DR(x)
    return (-hi, -lo, r, -d, (dhi, dlo))


def _find_central(builder: _LevelBuilder) -> None:
    """Return time of 0 and the halfwidth of the central domain I_{n+1}."""
    m, p, limits = builder.m, builder.p, builder.limits
    res = first_return_scalar(m, 0.0, p, limits.max_return_time)
    if res is None:
        return
    v = res[0]

    def pred(x):
        r = first_return_scalar(m, x, p, v)
        return r is not None and r[0] == v
    # geometric descent to bracket the central boundary
    hi = p * (1 - 1e-12)
    if pred(hi):
        w = hi
    else:
        lo = hi
        k = 1
        while True:
            cand = p * 0.5 ** k
            if pred(cand):
                w = _bisect_signature_boundary(
                    m, p, v, cand, lo, first_return_signature(m, cand, p, v)
                )
                break
            lo = cand
            k += 1
            if cand < 1e3 * m.precision.epsilon * max(1.0, p):
                # central domain below resolution
                builder.v = v
                builder.central_w = cand
                return
        # polish: the boundary maps onto the boundary of I_n under f^v
        y = _iterate_n(m, w, v)
        target = p if y > 0 else -p
        w = abs(_polish_endpoint(m, v, w, target, max(1e-13 * p, 1e-9 * w)))
    builder.v = v
    builder.central_w = w


def _freeze(builder: _LevelBuilder, **fields) -> NestLevel:
    m = builder.m
    max_b = builder.limits.max_branches
    cands = builder.cands
    if len(cands) > max_b:
        keep = sorted(cands, key=lambda c: c[1] - c[0], reverse=True)[:max_b]
        keep_set = {id(c) for c in keep}
        cands = [c for c in cands if id(c) in keep_set]
        builder.budget_exhausted = True
    pos = [c for c in cands if c[0] > 0]
    neg = [c for c in cands if c[1] < 0]
    branches = []
    # rank 1 = farthest from 0, so refinement appends indices instead of
    # shifting them
    for rank, c in enumerate(sorted(pos, key=lambda c: c[0], reverse=True), start=1):
        branches.append(
            Branch(rank, c[0], c[1], c[2], c[3], c[4])
        )
    for rank, c in enumerate(sorted(neg, key=lambda c: c[1]), start=1):
        branches.append(Branch(-rank, c[0], c[1], c[2], c[3], c[4]))
    branches.sort(key=lambda b: b.lo)
    central = None
    if builder.central_w is not None and builder.v is not None:
        w = builder.central_w
        central = Branch(
            0,
            -w,
            w,
            builder.v,
            0,
            (
                derivative_along_orbit(m, -w, builder.v),
                derivative_along_orbit(m, w, builder.v),
            ),
        )
    eps = m.precision.epsilon
    reliability = RELIABLE if 2 * builder.p >= 1e3 * eps else UNRELIABLE
    status = fields.pop("status", None) or (
        "budget_exhausted" if builder.budget_exhausted else "ok"
    )
    return NestLevel(
        n=builder.n,
        halfwidth=builder.p,
        branches=tuple(branches),
        central=central,
        reliability=reliability,
        status=status,
        complete_above=builder.complete_above,
        **fields,
    )


def _build_level(m, n, halfwidth, limits, enumerate_branches=True) -> _LevelBuilder:
    builder = _LevelBuilder(m, n, halfwidth, limits)
    eps = m.precision.epsilon
    if 2 * halfwidth < 1e3 * eps:
        return builder  # below resolution: no central search, no probing
    _find_central(builder)
    if enumerate_branches:
        lo_excl = builder.central_w if builder.central_w is not None else 0.0
        _enumerate_side(builder, lo_excl)
        for c in list(builder.cands):
            builder.add(_mirror_cand(c))
    return builder


def decompose_return_branches(
    m: MapInstance, level: NestLevel, limits: BranchLimits = BranchLimits()
) -> NestLevel:
    """Fill the first-return branch table of a level (complete above the
    length cutoff, within the probe and return-time budgets)."""
    builder = _build_level(m, level.n, level.halfwidth, limits)
    return _freeze(
        builder,
        tau=level.tau,
        v=builder.v,
        s=level.s,
        c=level.c,
        tilde=level.tilde,
        word0=level.word0,
        is_central_level=level.is_central_level,
    )


# ---------------------------------------------------------------------------
# landing words and nest extension


def _walk_to_central(builder: _LevelBuilder, x, max_f_steps: int, register=True):
    """Iterate the return map from x until it enters the central domain.

    Returns (list of branch cands, total time, status, final point).
    Unenumerated branches are discovered on demand (and registered when
    `register`)."""
    m, p, limits = builder.m, builder.p, builder.limits
    w = builder.central_w
    word: list[tuple] = []
    total = 0
    while True:
        if -w < x < w:
            return word, total, "landed", x
        if not (-p < x < p):
            return word, total, "left_level", x
        c = builder.find(x)
        if c is None or not (c[0] <= x <= c[1]):
            c = _locate_branch_at(m, p, x, limits.max_return_time)
            if c is None:
                return word, total, "escapes", x
            if register:
                builder.add(c)
                builder.add(_mirror_cand(c))
        word.append(c)
        total += c[2]
        if total > max_f_steps:
            return word, total, "max_steps", x
        x = _iterate_n(m, x, c[2])


def _indices_for(level: NestLevel, cands: Sequence[tuple]) -> tuple[int, ...]:
    out = []
    for c in cands:
        mid = 0.5 * (c[0] + c[1])
        b = level.branch_containing(mid)
        out.append(b.j if b is not None else 0)
    return tuple(out)


def _pullback_through_branch(m, branch_lo, branch_hi, r, target):
    """Preimage of the interval `target` under the monotone branch f^r
    restricted to [branch_lo, branch_hi]."""
    ends = []
    for val in target:
        g = lambda x: _iterate_n(m, x, r) - val
        try:
            b = Bracket.from_function(g, branch_lo, branch_hi)
        except Exception:
            # target endpoint outside the image: clamp to the branch end
            glo, ghi = g(branch_lo), g(branch_hi)
            ends.append(branch_lo if abs(glo) < abs(ghi) else branch_hi)
            continue
        ends.append(float(bisect_root(g, b, 1e-16 * max(1.0, abs(branch_hi)))))
    return (min(ends), max(ends))


def word_domain(m: MapInstance, level: NestLevel, word: Sequence[int], target=None):
    """Domain of the composed branch R^d (pullback of I_n, or of `target`,
    through the word's branches)."""
    p = level.halfwidth
    dom = target if target is not None else (-p, p)
    for j in reversed(list(word)):
        b = level.branch(j)
        dom = _pullback_through_branch(m, b.lo, b.hi, b.r, dom)
    return dom


def landing_word(
    m: MapInstance,
    level: NestLevel,
    x: float,
    max_steps: int = 1_000_000,
    materialize_domain: bool = False,
) -> LandingWord:
    """Branch itinerary of x under the return map until it enters the
    central domain; landing time is the sum of the branch return times."""
    if level.central is None:
        raise CriticalNonReturning("level has no central domain to land in")
    p = level.halfwidth
    if not (-p <= x <= p):
        raise ValueError(f"x={x!r} outside the level interval")
    builder = _LevelBuilder(m, level.n, p, BranchLimits())
    builder.v = level.v if level.v is not None else level.central.r
    builder.central_w = level.central.hi
    for b in level.branches:
        builder.add((b.lo, b.hi, b.r, b.direction, b.endpoint_log_derivatives))
    word_c, total, status, _ = _walk_to_central(builder, x, max_steps, register=False)
    truncated = None
    if status == "escapes" or status == "left_level":
        truncated = "EscapesEnumeratedBranches"
    elif status == "max_steps":
        raise MaxSteps(f"landing walk exceeded {max_steps} iterates")
    indices = _indices_for(level, word_c)
    if truncated == "EscapesEnumeratedBranches" and 0 in indices:
        # a visited branch is not in the frozen table
        indices = tuple(i for i in indices if i != 0)
    dom = None
    if materialize_domain and truncated is None:
        w = level.central.hi
        dom = word_domain(m, level, indices, target=(-w, w))
    return LandingWord(
        word=indices, landing_time=total, landing_domain=dom, truncated=truncated
    )


def _tilde_interval(m, prev: NestLevel, cur_halfwidth: float, word_cap: int):
    """Pullback of the previous level's word-domain neighbourhood: the
    enlarged interval around I_{n+1} used by the geometry estimates."""
    if prev.word0 is None or prev.v is None or len(prev.word0) == 0:
        return None
    if len(prev.word0) > word_cap:
        return None
    try:
        dom = word_domain(m, prev, prev.word0)  # I^d of the previous level
        # pull back through the central branch f^{v} of the previous level
        lo, hi = dom
        g = lambda x: _iterate_n(m, x, prev.v)
        # the positive-side boundary: f^v crosses the far endpoint of dom
        y0 = g(0.0)
        target = lo if y0 > lo else hi
        for t in (lo, hi):
            try:
                b = Bracket.from_function(
                    lambda x: g(x) - t, cur_halfwidth * 0.5, prev.halfwidth * (1 - 1e-12)
                )
            except Exception:
                continue
            wt = float(bisect_root(lambda x: g(x) - t, b, 1e-15))
            return (-wt, wt)
    except Exception:
        return None
    return None


def extend_nest(
    m: MapInstance,
    levels: Sequence[NestLevel],
    limits: BranchLimits = BranchLimits(),
    max_walk_steps: int = 200_000,
    compute_tilde: bool = True,
    tilde_word_cap: int = 64,
    enumerate_next: bool = True,
) -> list[NestLevel]:
    """Append level n+1 below the last level and fill the last level's
    transition data (tau, v, s, c, tilde, centrality)."""
    levels = list(levels)
    if not levels:
        raise ValueError("need at least one level")
    last = levels[-1]
    if last.central is None:
        raise CriticalNonReturning(
            "critical point does not return at the deepest level"
        )
    # rebuild a working copy of the last level so the walk can register
    # branches it visits
    builder = _LevelBuilder(m, last.n, last.halfwidth, limits)
    builder.v = last.v if last.v is not None else last.central.r
    builder.central_w = last.central.hi
    for b in last.branches:
        builder.add((b.lo, b.hi, b.r, b.direction, b.endpoint_log_derivatives))
    builder.complete_above = last.complete_above

    v = builder.v
    r0 = _iterate_n(m, 0.0, v)  # R_n(0)
    word_c, ltime, status, _ = _walk_to_central(builder, r0, max_walk_steps)
    new_last_status = last.status
    s_val: Optional[int] = None
    if status == "landed":
        s_val = len(word_c)
    elif status in ("max_steps", "escapes", "left_level"):
        new_last_status = "budget_exhausted"

    w = builder.central_w
    c_val = w / last.halfwidth
    frozen_last = _freeze(
        builder,
        status=new_last_status,
        v=v,
        s=s_val,
        c=c_val,
        word0=None,
        tau=None,
        is_central_level=(s_val == 0) if s_val is not None else None,
        tilde=last.tilde,
    )
    word_idx = _indices_for(frozen_last, word_c)
    tau = 0 if s_val == 0 else (word_idx[0] if word_idx else None)
    frozen_last = replace(frozen_last, word0=word_idx if s_val is not None else None, tau=tau)
    levels[-1] = frozen_last

    nb = _build_level(m, last.n + 1, w, limits, enumerate_branches=enumerate_next)
    tilde = None
    if compute_tilde and len(levels) >= 2:
        tilde = _tilde_interval(m, levels[-2], w, tilde_word_cap)
    new_level = _freeze(
        nb,
        tau=None,
        v=nb.v,
        s=None,
        c=None,
        word0=None,
        is_central_level=None,
        tilde=tilde,
    )
    levels.append(new_level)
    return levels


def build_nest(
    m: MapInstance,
    max_levels: int = 3,
    limits: BranchLimits = BranchLimits(),
    max_period: int = 64,
    max_walk_steps: int = 200_000,
    compute_tilde: bool = True,
    probe_depth: Optional[int] = None,
) -> NestResult:
    """Construct the principal nest down to max_levels (or until the
    critical point stops returning / the geometry degenerates).

    Levels deeper than probe_depth skip the full branch enumeration and
    carry only the central data plus branches visited by the critical
    orbit; this is the cheap mode used by parameter scans.
    """
    restr = restrictive_interval(m, max_period=max_period)
    try:
        p1 = first_nest_interval(m, restr.halfwidth, restr.period)
    except NoFixedPoint:
        return NestResult(levels=(), restrictive=restr, status="no_fixed_point")

    def _enum(n):
        return probe_depth is None or n <= probe_depth

    builder = _build_level(m, 1, p1, limits, enumerate_branches=_enum(1))
    levels = [
        _freeze(builder, tau=None, v=builder.v, s=None, c=None, word0=None,
                is_central_level=None, tilde=None)
    ]
    status = "ok"
    while len(levels) < max_levels:
        last = levels[-1]
        if last.reliability == UNRELIABLE:
            status = "unreliable"
            break
        if last.central is None:
            status = "critical_nonreturning"
            break
        levels = extend_nest(
            m,
            levels,
            limits=limits,
            max_walk_steps=max_walk_steps,
            compute_tilde=compute_tilde,
            enumerate_next=_enum(last.n + 1),
        )
    last = levels[-1]
    if status == "ok" and last.reliability == UNRELIABLE:
        status = "unreliable"
    elif status == "ok" and last.central is None:
        status = "critical_nonreturning"
    central_count = sum(1 for lv in levels if lv.is_central_level)
    return NestResult(
        levels=tuple(levels),
        restrictive=restr,
        status=status,
        central_level_count=central_count,
    )
