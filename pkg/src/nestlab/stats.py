"""Dynamical statistics along and around the critical orbit: expansion
exponent series, backward-tree minima, recurrence fits, near-critical
derivative mass, per-branch hyperbolicity and distortion, hyperbolic rates
away from the critical point, qs-capacity lower bounds and return/landing
distribution diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    CriticalNonReturning,
    CriticalOrbitPeriodic,
    InsufficientBranches,
    NoSegments,
)
from .maps import MapInstance, derivative_along_orbit, iterate_orbit
from .nest import NestLevel, first_return_scalar, landing_word, word_domain
from .numerics import LogProduct, golden_section_min, minimum_on_grid


# ---------------------------------------------------------------------------
# expansion along the critical orbit


@dataclass(frozen=True)
class CESeries:
    """a_k = ln|Df^k(f(0))| / k, plus the per-level subsequence e_n taken at
    the critical return times."""

    a: tuple[float, ...]  # a[k-1] holds a_k
    e: tuple[Optional[float], ...]
    liminf_estimate: float
    first_zero: Optional[int] = None
    tail_start: int = 0

    def a_k(self, k: int) -> float:
        return self.a[k - 1]


def ce_series(
    m: MapInstance,
    N: int,
    nest_levels: Optional[Sequence[NestLevel]] = None,
    tail_fraction: float = 0.5,
) -> CESeries:
    """Expansion exponents along the critical value orbit.

    Raises CriticalOrbitPeriodic when the orbit returns to the critical
    point (within roundoff tolerance), since the derivative product then
    vanishes identically.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    zero_tol = 1e3 * m.precision.epsilon * max(1.0, m.halfwidth)
    pts = iterate_orbit(m, 0.0, N)
    log_acc = 0.0
    a = []
    for k in range(1, N + 1):
        x = float(pts[k])
        if abs(x) <= zero_tol:
            raise CriticalOrbitPeriodic(first_zero=k)
        log_acc += math.log(abs(float(m.jet(x)[1])))
        a.append(log_acc / k)
    tail_start = max(1, int(math.ceil(N * tail_fraction)))
    liminf_estimate = min(a[tail_start - 1 :])
    e: list[Optional[float]] = []
    if nest_levels is not None:
        for lv in nest_levels:
            if lv.v is not None and 2 <= lv.v <= N + 1:
                e.append(a[lv.v - 2])  # e_n = a_{v_n - 1}
            else:
                e.append(None)
    return CESeries(
        a=tuple(a),
        e=tuple(e),
        liminf_estimate=liminf_estimate,
        first_zero=None,
        tail_start=tail_start,
    )


# ---------------------------------------------------------------------------
# backward Collet-Eckmann tree


@dataclass(frozen=True)
class BCEResult:
    """Per-depth minima of (1/n) ln|Df^n(x)| over the preimage tree of the
    critical point (f^n(x) = 0)."""

    min_exponents: tuple[float, ...]
    argmins: tuple[float, ...]
    node_counts: tuple[int, ...]

    def exponent(self, n: int) -> float:
        return self.min_exponents[n - 1]


def _preimages_batch(m: MapInstance, ys: np.ndarray):
    """All preimages of each y under the even unimodal map: the positive
    solution of f(x) = y (when it exists) and its mirror."""
    H = m.halfwidth
    f0 = float(m(0.0))
    fH = float(m(H))
    has = (ys <= f0) & (ys >= fH)
    sel = np.flatnonzero(has)
    if sel.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    lo = np.zeros(sel.size)
    hi = np.full(sel.size, H)
    t = ys[sel]
    f_np = m.f_np
    # f decreasing on [0, H]: f(lo) >= y >= f(hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        above = f_np(mid) >= t
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if float(np.max(hi - lo)) <= 1e-17 * max(1.0, H):
            break
    roots = 0.5 * (lo + hi)
    return roots, sel


def bce_min_exponent(m: MapInstance, depth: int, keep_all: bool = False) -> BCEResult:
    """Exhaustive preimage-tree enumeration by monotone-branch bisection.

    Sides with no preimage are pruned silently.  depth 0 gives an empty
    result.
    """
    if depth > 20:
        raise ValueError("depth capped at 20 (full binary preimage tree)")
    mins: list[float] = []
    args: list[float] = []
    counts: list[int] = []
    ys = np.array([0.0])
    logs = np.array([0.0])
    for n in range(1, depth + 1):
        roots, sel = _preimages_batch(m, ys)
        if roots.size == 0:
            break
        parent_logs = logs[sel]
        with np.errstate(divide="ignore"):
            dlog = np.log(np.abs(m.df_np(roots)))
        new_ys = np.concatenate([roots, -roots])
        new_logs = np.concatenate([parent_logs + dlog, parent_logs + dlog])
        expo = new_logs / n
        k = int(np.argmin(expo))
        mins.append(float(expo[k]))
        args.append(float(new_ys[k]))
        counts.append(int(new_ys.size))
        ys, logs = new_ys, new_logs
    return BCEResult(
        min_exponents=tuple(mins), argmins=tuple(args), node_counts=tuple(counts)
    )


# ---------------------------------------------------------------------------
# recurrence of the critical orbit


@dataclass(frozen=True)
class RecurrenceRecord:
    closest_returns: tuple[tuple[int, float], ...]
    fitted_exponent: float
    nonrecurrent: bool = False
    degenerate: Optional[int] = None  # orbit hit 0 exactly at this iterate


def recurrence_exponent(m: MapInstance, N: int) -> RecurrenceRecord:
    """Closest-return records of the critical orbit and the least-squares
    slope of -ln|f^k(0)| against ln k over records with k > sqrt(N)."""
    if N < 100:
        raise ValueError("N must be >= 100")
    zero_tol = 1e3 * m.precision.epsilon * max(1.0, m.halfwidth)
    jet = m.jet
    y = 0.0
    best = math.inf
    records: list[tuple[int, float]] = []
    for k in range(1, N + 1):
        y = jet(y)[0]
        d = abs(float(y))
        if d <= zero_tol:
            return RecurrenceRecord(
                closest_returns=tuple(records),
                fitted_exponent=math.inf,
                degenerate=k,
            )
        if d < best:
            best = d
            records.append((k, d))
    nonrecurrent = not any(k > 10 for k, _ in records)
    cutoff = math.sqrt(N)
    fit_pts = [(k, d) for k, d in records if k > cutoff]
    if nonrecurrent or not fit_pts:
        expo = 0.0
    elif len(fit_pts) == 1:
        k, d = fit_pts[0]
        expo = -math.log(d) / math.log(k)
    else:
        xs = np.log([k for k, _ in fit_pts])
        ysv = np.array([-math.log(d) for _, d in fit_pts])
        A = np.vstack([xs, np.ones_like(xs)]).T
        coef = np.linalg.lstsq(A, ysv, rcond=None)[0]
        expo = float(coef[0])
    return RecurrenceRecord(
        closest_returns=tuple(records),
        fitted_exponent=expo,
        nonrecurrent=nonrecurrent,
    )


# ---------------------------------------------------------------------------
# weak-regularity statistic


@dataclass(frozen=True)
class WRTable:
    """Per-delta averages of ln|Df| collected at near-critical returns.

    Entries at smaller delta always use a subset of the return terms of the
    larger-delta entries (monotone refinement on a fixed orbit)."""

    entries: tuple[tuple[float, float, int], ...]  # (delta, value, return count)

    def value(self, delta: float) -> float:
        for d, v, _ in self.entries:
            if d == delta:
                return v
        raise KeyError(delta)


def wr_statistic(m: MapInstance, N: int, deltas: Sequence[float]) -> WRTable:
    """(1/N) * sum of ln|Df(f^k(0))| over k <= N with f^k(0) in (-delta, delta)."""
    if N < 1_000:
        raise ValueError("N must be >= 1000")
    deltas = list(deltas)
    if any(d2 >= d1 for d1, d2 in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly decreasing")
    jet = m.jet
    y = 0.0
    sums = [0.0 for _ in deltas]
    counts = [0 for _ in deltas]
    for _ in range(N):
        y = jet(y)[0]
        ay = abs(float(y))
        if ay < deltas[0]:
            l = math.log(abs(float(jet(y)[1]))) if y != 0 else -math.inf
            for i, d in enumerate(deltas):
                if ay < d:
                    sums[i] += l
                    counts[i] += 1
                else:
                    break
    return WRTable(
        entries=tuple(
            (d, s / N, c) for d, s, c in zip(deltas, sums, counts)
        )
    )


# ---------------------------------------------------------------------------
# branch hyperbolicity and distortion


def _branch_log_deriv(m: MapInstance, r: int) -> Callable[[float], float]:
    def h(x: float) -> float:
        lp = derivative_along_orbit(m, x, r)
        return lp.log_abs

    return h


def branch_hyperbolicity(
    m: MapInstance, level: NestLevel, j: int, grid: int = 64
) -> float:
    """lambda_n(j) = inf over the branch of ln|DR_n| / r_n(j), via a grid
    scan with golden-section refinement around the best cell."""
    if j == 0:
        raise ValueError("hyperbolicity is defined for non-central branches")
    b = level.branch(j)
    h = _branch_log_deriv(m, b.r)
    _, vmin = minimum_on_grid(h, b.lo, b.hi, grid)
    ends = min(h(b.lo), h(b.hi))
    return min(vmin, ends) / b.r


def level_hyperbolicity(m: MapInstance, level: NestLevel, grid: int = 64) -> float:
    """lambda_n = inf over enumerated non-central branches of lambda_n(j)."""
    vals = [branch_hyperbolicity(m, level, b.j, grid) for b in level.branches]
    if not vals:
        raise InsufficientBranches("no enumerated non-central branches")
    return min(vals)


def distortion(m: MapInstance, level: NestLevel, word, grid: int = 64) -> float:
    """Dist = sup|D phi| / inf|D phi| for the branch composition phi over a
    word (or a single branch index); the empty word gives exactly 1."""
    if isinstance(word, int):
        b = level.branch(word)
        lo, hi, time = b.lo, b.hi, b.r
    else:
        seq = list(word.word if hasattr(word, "word") else word)
        if not seq:
            return 1.0
        lo, hi = word_domain(m, level, seq)
        time = sum(level.branch(j).r for j in seq)
    h = _branch_log_deriv(m, time)
    _, vmin = minimum_on_grid(h, lo, hi, grid)
    _, negmax = minimum_on_grid(lambda x: -h(x), lo, hi, grid)
    vmin = min(vmin, h(lo), h(hi))
    vmax = max(-negmax, h(lo), h(hi))
    return math.exp(vmax - vmin)


# ---------------------------------------------------------------------------
# hyperbolicity away from the critical point


def hyperbolicity_outside(
    m: MapInstance, eps: float, N: int, grid: int = 256
) -> tuple[float, float]:
    """Empirical (C, lambda) for expansion along orbit segments that stay
    outside (-eps, eps): lambda from the worst longest-segment average,
    C from the worst prefix deficit.  Lower-bound estimators only."""
    H = m.halfwidth
    if not 0 < eps < H / 2:
        raise ValueError("eps must be in (0, H/2)")
    xs = np.linspace(-H * (1 - 1e-9), H * (1 - 1e-9), grid)
    f_np, df_np = m.f_np, m.df_np
    y = xs.copy()
    outside = np.empty((N, grid), dtype=bool)
    logs = np.empty((N, grid))
    with np.errstate(divide="ignore"):
        for k in range(N):
            outside[k] = np.abs(y) > eps
            logs[k] = np.log(np.abs(df_np(y)))
            y = f_np(y)
    lam_min = math.inf
    deficit_min = math.inf
    found = False
    for i in range(grid):
        col = outside[:, i]
        runs = []
        start = None
        for k in range(N):
            if col[k] and start is None:
                start = k
            elif not col[k] and start is not None:
                runs.append((start, k))
                start = None
        if start is not None:
            runs.append((start, N))
        if not runs:
            continue
        found = True
        s, e = max(runs, key=lambda se: se[1] - se[0])
        seg = logs[s:e, i]
        lam_min = min(lam_min, float(seg.mean()))
    if not found:
        raise NoSegments(f"every sampled orbit enters (-{eps}, {eps}) immediately")
    lam_est = math.exp(lam_min)
    # prefix deficits against the fitted rate
    for i in range(grid):
        col = outside[:, i]
        start = None
        acc = 0.0
        length = 0
        for k in range(N):
            if col[k]:
                if start is None:
                    start, acc, length = k, 0.0, 0
                acc += logs[k, i]
                length += 1
                deficit_min = min(deficit_min, acc - (length - 1) * lam_min)
            else:
                start = None
    C_est = math.exp(deficit_min) if deficit_min < math.inf else 1.0
    return C_est, lam_est


# ---------------------------------------------------------------------------
# quasisymmetric capacity (lower bounds)


_S_MASTER = tuple(float(2.0 ** (j / 8.0)) for j in range(-64, 65))


def capacity_lower_bound(
    X: Sequence[tuple[float, float]],
    interval: tuple[float, float],
    gamma: float,
    family_size: int = 33,
) -> float:
    """Lower bound for the gamma-qs capacity of X in `interval`.

    Maximizes |h(X)|/|h(I)| over the test family of centred power maps
    h(x) = sign(x-c)|x-c|^s.  The radial-stretch extension of the power map
    has quasiconformal dilatation max(s, 1/s), so exponents are restricted
    to max(s, 1/s) <= gamma; this conversion is conservative, and only a
    lower bound for the true supremum over all gamma-qs maps is produced.
    gamma = 1 leaves only the affine map, reproducing the Lebesgue ratio.
    The exponent grid is a fixed master ladder filtered by gamma, so the
    candidate set (and hence the bound) is monotone in gamma.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise ValueError("degenerate interval")
    scale = hi - lo
    pieces = []
    for a, b in X:
        a = max(float(a), lo)
        b = min(float(b), hi)
        if b > a:
            pieces.append(((a - lo) / scale, (b - lo) / scale))
    if not pieces:
        return 0.0
    exps = [s for s in _S_MASTER if max(s, 1.0 / s) <= gamma + 1e-12]
    centres = np.linspace(0.0, 1.0, max(2, family_size))
    ends = np.array(pieces)  # shape (k, 2) in [0, 1]
    best = 0.0
    for s in exps:
        for c in centres:
            h = lambda x: np.sign(x - c) * np.abs(x - c) ** s
            h0, h1 = h(0.0), h(1.0)
            img = (h(ends) - h0) / (h1 - h0)
            val = float(np.sum(img[:, 1] - img[:, 0]))
            if val > best:
                best = val
    return best


# ---------------------------------------------------------------------------
# distribution diagnostics for landing and return times


@dataclass(frozen=True)
class DistributionReport:
    status: str  # ok | critical_nonreturning
    word_length_cdf: tuple[tuple[int, float], ...]
    return_time_cdf: tuple[tuple[int, float], ...]
    median_word_length: Optional[float]
    inverse_c: Optional[float]
    median_near_inverse_c: Optional[bool]
    lower_tail_consistent: Optional[bool]
    upper_tail_consistent: Optional[bool]
    censored_fraction: float = 0.0
    zero_mass: float = 0.0  # fraction of samples already inside I_{n+1}


def distribution_diagnostics(
    m: MapInstance,
    level: NestLevel,
    sample: int = 512,
    a_tilde: float = 0.5,
    b_tilde: float = 2.0,
    max_steps: int = 200_000,
) -> DistributionReport:
    """Empirical tails of the landing word length |d| and the return time
    over a sample grid in I_n, reported against the expected bound shapes
    k * c^a_tilde (lower tail) and exp(-k * c^b_tilde) (upper tail)."""
    if level.central is None or level.c is None:
        return DistributionReport(
            status="critical_nonreturning",
            word_length_cdf=(),
            return_time_cdf=(),
            median_word_length=None,
            inverse_c=None,
            median_near_inverse_c=None,
            lower_tail_consistent=None,
            upper_tail_consistent=None,
            zero_mass=0.0,
        )
    p = level.halfwidth
    xs = np.linspace(-p * (1 - 1e-7), p * (1 - 1e-7), sample)
    lens: list[int] = []
    censored = 0
    zero_mass = 0
    rts: list[int] = []
    w = level.central.hi
    for x in xs:
        x = float(x)
        if abs(x) < w:
            lens.append(0)
            zero_mass += 1
        else:
            try:
                lw = landing_word(m, level, x, max_steps=max_steps)
            except Exception:
                censored += 1
                continue
            if lw.truncated:
                censored += 1
                continue
            lens.append(len(lw.word))
        fr = first_return_scalar(m, x, p, 1 << 16)
        if fr is not None:
            rts.append(fr[0])
    if not lens:
        raise InsufficientBranches("no usable samples")
    lens_arr = np.sort(np.array(lens))
    rts_arr = np.sort(np.array(rts)) if rts else np.array([], dtype=int)

    def _cdf(arr):
        if arr.size == 0:
            return ()
        ks = np.unique(arr)
        return tuple((int(k), float(np.mean(arr <= k))) for k in ks)

    c = level.c
    med = float(np.median(lens_arr))
    inv_c = 1.0 / c
    near = inv_c / 10.0 <= max(med, 0.5) <= inv_c * 10.0
    # bound-shape consistency at the supplied constants (with the usual
    # order-one slack: these are shapes, not sharp constants)
    lower_ok = True
    upper_ok = True
    n_tot = lens_arr.size
    for k, F in _cdf(lens_arr):
        if k < 1:
            continue
        if F > 10.0 * k * c**a_tilde + 0.05:
            lower_ok = False
        surv = 1.0 - F + 1.0 / n_tot
        if surv > 10.0 * math.exp(-k * c**b_tilde) + 0.05:
            upper_ok = False
    return DistributionReport(
        status="ok",
        word_length_cdf=_cdf(lens_arr),
        return_time_cdf=_cdf(rts_arr),
        median_word_length=med,
        inverse_c=inv_c,
        median_near_inverse_c=bool(near),
        lower_tail_consistent=lower_ok,
        upper_tail_consistent=upper_ok,
        censored_fraction=censored / sample,
        zero_mass=zero_mass / sample,
    )
