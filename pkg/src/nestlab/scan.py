"""Parameter-space harness: classify single parameters, sweep windows,
approximate combinatorial parameter windows, and persist results.

Classification is a deterministic function of (family, parameters,
budgets, precision): no randomness enters a single classification, and a
sweep's sample set is drawn up front from the seed, so results are
byte-identical for any worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CriticalOrbitPeriodic,
    EscapedDomain,
    IOFailure,
    NeutralSuspected,
    NoFixedPoint,
    SignatureUnstable,
    ZeroDerivative,
)
from .maps import MapInstance, make_instance, t_of_a, a_of_t
from .nest import BranchLimits, NestResult, build_nest, RELIABLE
from .numerics import Precision
from .kneading import RegularReport, detect_regular
from .stats import bce_min_exponent, ce_series, recurrence_exponent, wr_statistic

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Budgets:
    """All classification budgets and thresholds; CLI and config override
    these field by field."""

    max_iter: int = 6_000  # regular detection orbit length
    max_period: int = 64  # attractor period and renormalization cap
    renorm_depth: int = 8  # certified renormalization chain cap
    nest_levels: int = 6
    max_return_time: int = 4_096
    min_branch_length_rel: float = 2e-4
    max_probes: int = 40_000
    probe_depth: int = 0  # full branch enumeration down to this level
    max_walk_steps: int = 60_000
    ce_N: int = 2_000
    ce_threshold: float = 0.05
    ce_tail_fraction: float = 0.5
    recurrence_N: int = 2_000
    wr_deltas: tuple[float, ...] = (0.1, 0.01)
    wr_N: int = 2_000
    bce_depth: int = 4
    cycle_tol: float = 1e-10
    mult_tol: float = 1e-6
    precision_bits: int = 53

    @property
    def precision(self) -> Precision:
        return Precision(self.precision_bits)

    def branch_limits(self) -> BranchLimits:
        return BranchLimits(
            max_return_time=self.max_return_time,
            min_branch_length_rel=self.min_branch_length_rel,
            max_probes=self.max_probes,
        )


VERDICT_REGULAR = "Regular"
VERDICT_CE = "CECandidate"
VERDICT_RENORM = "Renormalizable"
VERDICT_UNDETERMINED = "Undetermined"


@dataclass(frozen=True)
class Classification:
    """Verdict for one parameter plus the evidence behind it."""

    verdict: str
    period: Optional[int] = None
    multiplier: Optional[float] = None
    basin_witness: Optional[int] = None
    lambda_hat: Optional[float] = None
    recurrence_exponent: Optional[float] = None
    nest_depth: int = 0
    reliable_nest_depth: int = 0
    renorm_period: int = 1
    renorm_depth_reached: int = 0
    undetermined_reason: Optional[str] = None
    c_list: tuple[float, ...] = ()
    e_list: tuple[Optional[float], ...] = ()
    central_levels: int = 0
    wr_values: tuple[float, ...] = ()
    bce_min: Optional[float] = None
    nest_status: str = ""
    budgets_used: dict = field(default_factory=dict)


def classify_parameter(
    family_id: str, params: Sequence[float], budgets: Budgets = Budgets()
) -> Classification:
    """Full pipeline: attractor detection, renormalization accounting,
    principal nest, critical-orbit statistics, verdict."""
    m = make_instance(family_id, params, budgets.precision)
    used = {"max_iter": budgets.max_iter, "ce_N": budgets.ce_N}

    try:
        reg = detect_regular(
            m,
            max_iter=budgets.max_iter,
            max_period=budgets.max_period,
            cycle_tol=budgets.cycle_tol,
            mult_tol=budgets.mult_tol,
        )
    except NeutralSuspected as exc:
        return Classification(
            verdict=VERDICT_UNDETERMINED,
            undetermined_reason="NeutralSuspected",
            period=exc.period,
            multiplier=exc.multiplier,
            budgets_used=used,
        )
    if reg is not None:
        return Classification(
            verdict=VERDICT_REGULAR,
            period=reg.period,
            multiplier=reg.multiplier,
            basin_witness=reg.basin_witness,
            budgets_used=used,
        )

    nest = build_nest(
        m,
        max_levels=budgets.nest_levels,
        limits=budgets.branch_limits(),
        max_period=budgets.max_period,
        max_walk_steps=budgets.max_walk_steps,
        compute_tilde=False,
        probe_depth=budgets.probe_depth,
    )
    renorm_period = nest.restrictive.period
    renorm_depth = len(nest.restrictive.chain)
    c_list = tuple(lv.c for lv in nest.levels if lv.c is not None)
    reliable_depth = sum(1 for lv in nest.levels if lv.reliability == RELIABLE)

    if nest.restrictive.max_period_exceeded or renorm_depth >= budgets.renorm_depth:
        return Classification(
            verdict=VERDICT_RENORM,
            renorm_period=renorm_period,
            renorm_depth_reached=renorm_depth,
            nest_depth=nest.depth,
            reliable_nest_depth=reliable_depth,
            c_list=c_list,
            central_levels=nest.central_level_count,
            nest_status=nest.status,
            budgets_used=used,
        )

    common = dict(
        nest_depth=nest.depth,
        reliable_nest_depth=reliable_depth,
        renorm_period=renorm_period,
        renorm_depth_reached=renorm_depth,
        c_list=c_list,
        central_levels=nest.central_level_count,
        nest_status=nest.status,
        budgets_used=used,
    )

    try:
        ces = ce_series(
            m, budgets.ce_N, nest_levels=nest.levels,
            tail_fraction=budgets.ce_tail_fraction,
        )
        rec = recurrence_exponent(m, budgets.recurrence_N)
        wr = wr_statistic(m, budgets.wr_N, budgets.wr_deltas)
        bce = bce_min_exponent(m, budgets.bce_depth)
    except CriticalOrbitPeriodic as exc:
        # superattracting orbit missed by the detector budget
        return Classification(
            verdict=VERDICT_UNDETERMINED,
            undetermined_reason=f"BudgetExhausted:superattracting@{exc.first_zero}",
            **common,
        )
    except EscapedDomain:
        return Classification(
            verdict=VERDICT_UNDETERMINED,
            undetermined_reason="EscapedDomain",
            **common,
        )

    lam_hat = ces.liminf_estimate
    rec_expo = rec.fitted_exponent
    common.update(
        lambda_hat=lam_hat,
        recurrence_exponent=rec_expo,
        e_list=ces.e,
        wr_values=tuple(v for _, v, _ in wr.entries),
        bce_min=(bce.min_exponents[-1] if bce.min_exponents else None),
    )

    if lam_hat >= budgets.ce_threshold and math.isfinite(rec_expo):
        return Classification(verdict=VERDICT_CE, **common)
    if nest.status == "no_fixed_point":
        reason = "BudgetExhausted:no_orientation_reversing_fixed_point"
    elif nest.status == "unreliable":
        reason = "Unreliable"
    elif lam_hat < budgets.ce_threshold:
        reason = "BelowCEThreshold"
        if nest.status == "critical_nonreturning":
            reason = "CriticalNonReturningWeakCE"
    else:
        reason = "BudgetExhausted"
    return Classification(
        verdict=VERDICT_UNDETERMINED, undetermined_reason=reason, **common
    )


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class WindowSpec:
    """Axis-aligned parameter window: per-parameter (lo, hi) ranges.
    Degenerate ranges pin a parameter.  For two or more varying parameters
    the sampler draws random lines through the base point."""

    ranges: tuple[tuple[float, float], ...]
    base: Optional[tuple[float, ...]] = None

    @property
    def varying(self) -> tuple[int, ...]:
        return tuple(
            i for i, (lo, hi) in enumerate(self.ranges) if hi > lo
        )

    def base_point(self) -> tuple[float, ...]:
        if self.base is not None:
            return self.base
        return tuple((lo + hi) / 2 for lo, hi in self.ranges)


def draw_samples(window: WindowSpec, samples: int, seed: int) -> list[tuple[float, ...]]:
    """Deterministic sample list.  One varying dimension: uniform draws.
    Several: uniform positions along random lines through the base point
    (each sample gets its own line)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    varying = window.varying
    base = list(window.base_point())
    out = []
    if len(varying) <= 1:
        if not varying:
            return [tuple(base) for _ in range(samples)]
        i = varying[0]
        lo, hi = window.ranges[i]
        us = rng.random(samples)
        for u in us:
            pt = list(base)
            pt[i] = lo + (hi - lo) * float(u)
            out.append(tuple(pt))
        return out
    half = {i: (window.ranges[i][1] - window.ranges[i][0]) / 2 for i in varying}
    for _ in range(samples):
        dirv = rng.normal(size=len(varying))
        norm = math.sqrt(float(np.dot(dirv, dirv)))
        if norm == 0:
            dirv = np.ones(len(varying))
            norm = math.sqrt(len(varying))
        dirv = dirv / norm
        u = float(rng.uniform(-1.0, 1.0))
        pt = list(base)
        for k, i in enumerate(varying):
            lo, hi = window.ranges[i]
            val = base[i] + u * float(dirv[k]) * half[i]
            pt[i] = min(hi, max(lo, val))
        out.append(tuple(pt))
    return out


@dataclass(frozen=True)
class ScanRecord:
    index: int
    family: str
    params: tuple[float, ...]
    t: Optional[float]
    a_raw: Optional[float]
    classification: Classification
    schema_version: int = SCHEMA_VERSION


_CSV_FIELDS = [
    "index", "schema_version", "family", "params", "t", "a_raw", "verdict",
    "period", "multiplier", "lambda_hat", "recurrence_exponent",
    "nest_depth", "reliable_nest_depth", "renorm_period",
    "renorm_depth_reached", "undetermined_reason", "c_list", "e_list",
    "central_levels", "wr_values", "bce_min", "nest_status",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _fmt_list(xs) -> str:
    return ";".join(_fmt(x) for x in xs)


def record_to_row(rec: ScanRecord) -> dict:
    c = rec.classification
    return {
        "index": rec.index,
        "schema_version": rec.schema_version,
        "family": rec.family,
        "params": _fmt_list(rec.params),
        "t": _fmt(rec.t),
        "a_raw": _fmt(rec.a_raw),
        "verdict": c.verdict,
        "period": _fmt(c.period),
        "multiplier": _fmt(c.multiplier),
        "lambda_hat": _fmt(c.lambda_hat),
        "recurrence_exponent": _fmt(c.recurrence_exponent),
        "nest_depth": c.nest_depth,
        "reliable_nest_depth": c.reliable_nest_depth,
        "renorm_period": c.renorm_period,
        "renorm_depth_reached": c.renorm_depth_reached,
        "undetermined_reason": c.undetermined_reason or "",
        "c_list": _fmt_list(c.c_list),
        "e_list": _fmt_list(c.e_list),
        "central_levels": c.central_levels,
        "wr_values": _fmt_list(c.wr_values),
        "bce_min": _fmt(c.bce_min),
        "nest_status": c.nest_status,
    }


def _record_to_json(rec: ScanRecord) -> str:
    row = record_to_row(rec)
    return json.dumps(row, sort_keys=True)


def _raw_a(family_id: str, params: Sequence[float]):
    if family_id == "quadratic":
        return params[0], t_of_a(params[0])
    if family_id == "nquadratic":
        return a_of_t(params[0]), params[0]
    if family_id == "pquadratic":
        return params[0], t_of_a(params[0])
    return None, None


def _classify_chunk(args):
    family_id, indexed_params, budgets = args
    out = []
    for index, params in indexed_params:
        cls = classify_parameter(family_id, params, budgets)
        a_raw, t = _raw_a(family_id, params)
        out.append(
            ScanRecord(
                index=index,
                family=family_id,
                params=tuple(params),
                t=t,
                a_raw=a_raw,
                classification=cls,
            )
        )
    return out


def scan_range(
    family_id: str,
    window: WindowSpec,
    samples: int,
    budgets: Budgets = Budgets(),
    seed: int = 0,
    jobs: int = 1,
    skip_indices: Optional[set[int]] = None,
) -> list[ScanRecord]:
    """Classify seeded samples of the window; deterministic for a fixed
    seed regardless of the worker count.  Indices in skip_indices are not
    recomputed (resume support)."""
    pts = draw_samples(window, samples, seed)
    todo = [
        (i, p) for i, p in enumerate(pts)
        if skip_indices is None or i not in skip_indices
    ]
    if not todo:
        return []
    if jobs <= 1:
        return _classify_chunk((family_id, todo, budgets))
    nchunk = max(1, math.ceil(len(todo) / (4 * jobs)))
    tasks = [
        (family_id, todo[k : k + nchunk], budgets)
        for k in range(0, len(todo), nchunk)
    ]
    results: list[ScanRecord] = []
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for chunk in ex.map(_classify_chunk, tasks):
            results.extend(chunk)
    results.sort(key=lambda r: r.index)
    return results


def summarize(records: Sequence[ScanRecord]) -> dict:
    total = len(records)
    frac = {}
    for r in records:
        frac[r.classification.verdict] = frac.get(r.classification.verdict, 0) + 1
    return {
        "samples": total,
        "counts": frac,
        "fractions": {k: v / total for k, v in frac.items()} if total else {},
    }


# ---------------------------------------------------------------------------
# persistence


class _LockFile:
    def __init__(self, path: str):
        self.path = path + ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise IOFailure(f"lock held: {self.path}") from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass


def export(records: Sequence[ScanRecord], fmt: str, path: str) -> None:
    """Write records (csv with RFC-4180 quoting, or JSON lines), ordered by
    sample index, atomically, under a lock file."""
    if not records:
        raise IOFailure("no records to export")
    records = sorted(records, key=lambda r: r.index)
    tmp = path + ".tmp"
    try:
        with _LockFile(path):
            with open(tmp, "w", newline="", encoding="utf-8") as fh:
                if fmt == "csv":
                    w = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
                    w.writeheader()
                    for r in records:
                        w.writerow(record_to_row(r))
                elif fmt in ("jsonl", "json"):
                    for r in records:
                        fh.write(_record_to_json(r) + "\n")
                else:
                    raise IOFailure(f"unknown format {fmt!r}")
            os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc


def load_indices(path: str, fmt: str) -> set[int]:
    """Indices already present in a scan artifact (resume support);
    malformed trailing lines are ignored."""
    done: set[int] = set()
    if not os.path.exists(path):
        return done
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            if fmt == "csv":
                for row in csv.DictReader(fh):
                    try:
                        done.add(int(row["index"]))
                    except (KeyError, TypeError, ValueError):
                        continue
            else:
                for line in fh:
                    try:
                        done.add(int(json.loads(line)["index"]))
                    except (KeyError, ValueError):
                        continue
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    return done


def load_rows(path: str, fmt: str) -> dict[int, dict]:
    rows: dict[int, dict] = {}
    if not os.path.exists(path):
        return rows
    with open(path, "r", newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            for row in csv.DictReader(fh):
                try:
                    rows[int(row["index"])] = dict(row)
                except (KeyError, ValueError):
                    continue
        else:
            for line in fh:
                try:
                    row = json.loads(line)
                    rows[int(row["index"])] = row
                except (KeyError, ValueError):
                    continue
    return rows


def rows_to_text(rows: Sequence[dict], fmt: str) -> str:
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.DictWriter(buf, fieldnames=_CSV_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in _CSV_FIELDS})
    else:
        for row in rows:
            buf.write(json.dumps(row, sort_keys=True) + "\n")
    return buf.getvalue()


def run_scan(
    family_id: str,
    window: WindowSpec,
    samples: int,
    budgets: Budgets = Budgets(),
    seed: int = 0,
    jobs: int = 1,
    out_path: Optional[str] = None,
    fmt: str = "csv",
    resume: bool = True,
) -> tuple[list[dict], dict]:
    """Scan with optional persistence and resume: already-persisted sample
    indices are skipped, the final artifact is rewritten complete and
    ordered."""
    existing: dict[int, dict] = {}
    if out_path and resume:
        existing = load_rows(out_path, fmt)
        existing = {i: r for i, r in existing.items() if 0 <= i < samples}
    fresh = scan_range(
        family_id, window, samples, budgets, seed, jobs,
        skip_indices=set(existing) if existing else None,
    )
    rows = dict(existing)
    for rec in fresh:
        rows[rec.index] = record_to_row(rec)
    ordered = [rows[i] for i in sorted(rows)]
    if out_path:
        text = rows_to_text(ordered, fmt)
        tmp = out_path + ".tmp"
        try:
            with _LockFile(out_path):
                with open(tmp, "w", newline="", encoding="utf-8") as fh:
                    fh.write(text)
                os.replace(tmp, out_path)
        except OSError as exc:
            raise IOFailure(str(exc)) from exc
    counts: dict[str, int] = {}
    for row in ordered:
        counts[row["verdict"]] = counts.get(row["verdict"], 0) + 1
    summary = {
        "samples": len(ordered),
        "computed": len(fresh),
        "resumed": len(existing),
        "counts": counts,
        "fractions": {k: v / len(ordered) for k, v in counts.items()},
    }
    return ordered, summary


# ---------------------------------------------------------------------------
# combinatorial parameter windows


@dataclass(frozen=True)
class ParameterWindow:
    n: int
    lo: float
    hi: float
    base: tuple[float, ...]
    signature: tuple


def nest_signature(
    family_id: str, params: Sequence[float], n: int, budgets: Budgets = Budgets()
) -> tuple:
    """Index-free combinatorics signature of the nest to level n: the
    renormalization periods, the critical return times v_1..v_n, and per
    level below n the side, return time and letter times of the landing of
    the critical return (the data that stays constant while the deeper
    structure moves continuously)."""
    m = make_instance(family_id, params, budgets.precision)
    nest = build_nest(
        m,
        max_levels=n,
        limits=budgets.branch_limits(),
        max_period=budgets.max_period,
        max_walk_steps=budgets.max_walk_steps,
        compute_tilde=False,
        probe_depth=0,
    )
    if nest.status == "no_fixed_point":
        return ("no_fixed_point", tuple(p for _, p in nest.restrictive.chain))
    sig = [tuple(p for _, p in nest.restrictive.chain)]
    for lv in nest.levels:
        if lv.n > n:
            break
        sig.append(("v", lv.n, lv.v))
        if lv.n < n:
            if lv.word0 is None:
                sig.append(("w", lv.n, None))
            else:
                letters = []
                for j in lv.word0:
                    b = lv.branch(j)
                    letters.append((1 if j > 0 else (-1 if j < 0 else 0), b.r))
                sig.append(("w", lv.n, tuple(letters)))
    return tuple(sig)


def parameter_window(
    family_id: str,
    params: Sequence[float],
    n: int,
    window_tol: float = 1e-8,
    budgets: Budgets = Budgets(),
    axis: int = 0,
    max_halfwidth: float = 0.5,
) -> ParameterWindow:
    """Maximal parameter interval around the base point (along one axis)
    over which the level-n combinatorics signature is constant, located by
    outward doubling and bisection to window_tol."""
    base = tuple(float(p) for p in params)
    sig0 = nest_signature(family_id, base, n, budgets)
    # recompute with a larger walk budget: an unstable signature means the
    # base data itself is not trustworthy
    check = nest_signature(
        family_id, base, n, replace(budgets, max_walk_steps=2 * budgets.max_walk_steps)
    )
    if check != sig0:
        raise SignatureUnstable(f"signature at {base} not reproducible")

    def same(delta: float) -> bool:
        p = list(base)
        p[axis] = base[axis] + delta
        try:
            return nest_signature(family_id, tuple(p), n, budgets) == sig0
        except Exception:
            return False

    ends = []
    for sgn in (-1.0, 1.0):
        step = window_tol
        inner = 0.0
        while step <= max_halfwidth and same(sgn * step):
            inner = step
            step *= 2.0
        outer = min(step, max_halfwidth)
        if inner == 0.0 and not same(sgn * window_tol):
            ends.append(0.0)  # window narrower than the tolerance
            continue
        lo_d, hi_d = inner, outer
        while hi_d - lo_d > window_tol:
            mid = 0.5 * (lo_d + hi_d)
            if same(sgn * mid):
                lo_d = mid
            else:
                hi_d = mid
        ends.append(lo_d)
    return ParameterWindow(
        n=n,
        lo=base[axis] - ends[0],
        hi=base[axis] + ends[1],
        base=base,
        signature=sig0,
    )
