"""Branch and landing taxonomies for the hyperbolicity bookkeeping.

Landings (words) are graded standard / fast / excellent / cool; returns
(branches) are graded very-good / bad / good.  The grades are literal
clause evaluations with configurable constants; the inductive very-good /
bad recursion starts at a base level where every branch is very good and
none is bad.  Clause names in witnesses: LS1-LS3 (standard), LF1 (fast),
LE1-LE2 (excellent), LC1-LC4 (cool), VG (distance), G1-G2 (good).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientDepth
from .maps import MapInstance
from .nest import NestLevel, NestResult, landing_word, _iterate_n
from .stats import branch_hyperbolicity, level_hyperbolicity


@dataclass(frozen=True)
class ClassifierConstants:
    """Grading constants.  b > b_tilde > 1; the reciprocals a = 1/b and
    a_tilde = 1/b_tilde are derived.  The sparsity coefficients default to
    the 6 * 2^n schedule but are configurable, since only their order of
    growth matters."""

    gamma: float = 1.2
    b: float = 8.0
    b_tilde: float = 2.0
    n0: int = 1
    sparse_base: float = 6.0
    sparse_growth: float = 2.0

    def __post_init__(self):
        if not self.gamma >= 1:
            raise ValueError("gamma must be >= 1")
        if not self.b > self.b_tilde > 1:
            raise ValueError("need b > b_tilde > 1")

    @property
    def a(self) -> float:
        return 1.0 / self.b

    @property
    def a_tilde(self) -> float:
        return 1.0 / self.b_tilde

    def sparse_factor(self, n: int) -> float:
        return self.sparse_base * self.sparse_growth**n

    # capacity bookkeeping schedules; recorded for reference, never used in
    # a computation here
    def gamma_n(self, n: int) -> float:
        return self.gamma * (n + 1) / n

    def gamma_tilde_n(self, n: int) -> float:
        return self.gamma * (2 * n + 3) / (2 * n + 1)


def parse_constants(text: str) -> ClassifierConstants:
    """key=value lines (gamma, b, b_tilde, n0, sparse_base, sparse_growth);
    '#' starts a comment."""
    kv = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    kwargs = {}
    for key in ("gamma", "b", "b_tilde", "sparse_base", "sparse_growth"):
        if key in kv:
            kwargs[key] = float(kv[key])
    if "n0" in kv:
        kwargs["n0"] = int(kv["n0"])
    return ClassifierConstants(**kwargs)


@dataclass(frozen=True)
class LandingLabel:
    label: str  # Cool | Excellent | Standard | Fast | None
    witness: Optional[str]
    clauses: tuple[tuple[str, bool], ...]


@dataclass(frozen=True)
class ReturnLabel:
    label: str  # VeryGood | Bad | Good | Neither
    very_good: bool
    bad: bool
    good: Optional[bool]  # None when G2 cannot be evaluated
    witness: Optional[str]


@dataclass(frozen=True)
class BranchTaxonomy:
    constants: ClassifierConstants
    lambda_base: float
    landings: dict
    returns: dict


def choose_n0(levels: Sequence[NestLevel], threshold: float = 0.1) -> int:
    """Default base level: the first level whose scaling factor is below
    the threshold (deep enough that the clauses are non-vacuous)."""
    for lv in levels:
        if lv.c is not None and lv.c < threshold:
            return lv.n
    return levels[0].n if levels else 1


class _TaxonomyEngine:
    def __init__(self, m: MapInstance, result: NestResult | Sequence[NestLevel],
                 consts: ClassifierConstants, grid: int = 64,
                 g2_time_cap: int = 2048):
        if isinstance(result, NestResult):
            self.levels = {lv.n: lv for lv in result.levels}
            self.q_top = result.restrictive.halfwidth
        else:
            self.levels = {lv.n: lv for lv in result}
            self.q_top = None
        self.m = m
        self.consts = consts
        self.grid = grid
        self.g2_time_cap = g2_time_cap
        self._lam: dict = {}
        self._vg: dict = {}
        self._bad: dict = {}
        self._words: dict = {}
        base = self.level(consts.n0)
        self._lambda_base = level_hyperbolicity(m, base, grid)

    # ---- data access -----------------------------------------------------

    def level(self, n: int) -> NestLevel:
        lv = self.levels.get(n)
        if lv is None:
            raise InsufficientDepth(f"level {n} not built")
        return lv

    def c(self, n: int) -> float:
        """Scaling factor c_n; c_0 is the ratio of I_1 to the restrictive
        interval (the natural continuation of the sequence upward)."""
        if n == 0:
            if self.q_top is None:
                raise InsufficientDepth("c_0 needs the restrictive interval")
            return self.level(1).halfwidth / self.q_top
        lv = self.level(n)
        if lv.c is None:
            raise InsufficientDepth(f"c_{n} not available (level not extended)")
        return lv.c

    def lam(self, n: int, j: int) -> float:
        key = (n, j)
        if key not in self._lam:
            self._lam[key] = branch_hyperbolicity(self.m, self.level(n), j, self.grid)
        return self._lam[key]

    def r(self, n: int, j: int) -> int:
        return self.level(n).branch(j).r

    def word_of_branch(self, n1: int, j: int) -> Optional[tuple[int, ...]]:
        """Landing word at level n1-1 of the image of branch j of level n1
        under the central branch map."""
        key = (n1, j)
        if key in self._words:
            return self._words[key]
        n = n1 - 1
        prev = self.level(n)
        if prev.v is None or prev.central is None:
            raise InsufficientDepth(f"level {n} has no central data")
        b = self.level(n1).branch(j)
        mid = 0.5 * (b.lo + b.hi)
        y = _iterate_n(self.m, mid, prev.v)
        try:
            lw = landing_word(self.m, prev, float(y), max_steps=1_000_000)
            word = None if lw.truncated else lw.word
        except Exception:
            word = None
        self._words[key] = word
        return word

    # ---- landing clauses ---------------------------------------------------

    def _clause_LS1(self, n, word):
        a = self.consts.a
        m_len = len(word)
        cn = self.c(n)
        return cn ** (-a / 2) < m_len < cn ** (-2 * self.consts.b)

    def _clause_LS2(self, n, word):
        bound = self.c(n - 1) ** (-3 * self.consts.b)
        return all(self.r(n, j) < bound for j in word)

    def _sparse(self, n, word, k_lo, coeff, bad_pred):
        """#{i <= k : bad_pred(j_i)} < coeff * k for all k in (k_lo, m]."""
        m_len = len(word)
        count = 0
        lo = int(math.floor(k_lo))
        for k in range(1, m_len + 1):
            if bad_pred(word[k - 1]):
                count += 1
            if k > lo and k >= k_lo and not count < coeff * k:
                return False
        return True

    def _clause_LS3(self, n, word):
        cprev = self.c(n - 1)
        a = self.consts.a
        k_lo = cprev ** (-2 * self.consts.b)
        coeff = self.consts.sparse_factor(n) * cprev ** (a / 2)
        thr = cprev ** (-a / 2)
        return self._sparse(n, word, k_lo, coeff, lambda j: self.r(n, j) < thr)

    def _clause_LF1(self, n, word):
        return len(word) < self.c(n) ** (-self.consts.a / 2)

    def _clause_LE1(self, n, word):
        cprev = self.c(n - 1)
        k_lo = cprev ** (-2 * self.consts.b)
        coeff = self.consts.sparse_factor(n) * cprev ** (self.consts.a**2)
        return self._sparse(n, word, k_lo, coeff, lambda j: not self.very_good(n, j))

    def _clause_LE2(self, n, word):
        cprev = self.c(n - 1)
        k_lo = self.c(n) ** (-1.0 / n)
        coeff = self.consts.sparse_factor(n) * cprev**n
        return self._sparse(n, word, k_lo, coeff, lambda j: self.bad(n, j))

    def _clause_LC1(self, n, word):
        bound = self.c(n - 1) ** (-self.consts.a**2 / 2)
        for i, j in enumerate(word, start=1):
            if i > bound:
                break
            if not self.very_good(n, j):
                return False
        return True

    def _clause_LC2(self, n, word):
        cprev = self.c(n - 1)
        a = self.consts.a
        k_lo = cprev ** (-(a**2) / 4)
        coeff = self.consts.sparse_factor(n) * cprev ** (a / 3)
        thr = cprev ** (-a / 2)
        return self._sparse(n, word, k_lo, coeff, lambda j: self.r(n, j) < thr)

    def _clause_LC3(self, n, word):
        cprev = self.c(n - 1)
        k_lo = cprev ** (-n / 3.0)
        coeff = self.consts.sparse_factor(n) * cprev ** (n / 6.0)
        return self._sparse(n, word, k_lo, coeff, lambda j: self.bad(n, j))

    def _clause_LC4(self, n, word):
        bound = self.c(n - 1) ** (-n / 2.0)
        for i, j in enumerate(word, start=1):
            if i > bound:
                break
            if self.bad(n, j):
                return False
        return True

    # ---- label assembly ----------------------------------------------------

    def landing_label(self, n: int, word: Sequence[int]) -> LandingLabel:
        word = tuple(word)
        if len(word) == 0:
            # an empty landing is not a passage through branches at all
            return LandingLabel("None", "LS1", (("LS1", False),))
        clauses: list[tuple[str, bool]] = []
        standard = True
        witness = None
        for name, fn in (
            ("LS1", self._clause_LS1),
            ("LS2", self._clause_LS2),
            ("LS3", self._clause_LS3),
        ):
            ok = fn(n, word)
            clauses.append((name, ok))
            if not ok and standard:
                standard = False
                witness = name
        if not standard:
            lf1 = self._clause_LF1(n, word)
            ls2 = dict(clauses)["LS2"]
            clauses.append(("LF1", lf1))
            if lf1 and ls2:
                return LandingLabel("Fast", witness, tuple(clauses))
            return LandingLabel("None", witness, tuple(clauses))
        for name, fn in (("LE1", self._clause_LE1), ("LE2", self._clause_LE2)):
            ok = fn(n, word)
            clauses.append((name, ok))
            if not ok:
                return LandingLabel("Standard", name, tuple(clauses))
        for name, fn in (
            ("LC1", self._clause_LC1),
            ("LC2", self._clause_LC2),
            ("LC3", self._clause_LC3),
            ("LC4", self._clause_LC4),
        ):
            ok = fn(n, word)
            clauses.append((name, ok))
            if not ok:
                return LandingLabel("Excellent", name, tuple(clauses))
        return LandingLabel("Cool", None, tuple(clauses))

    # ---- very good / bad recursion ------------------------------------------

    def very_good(self, n: int, j: int) -> bool:
        if j == 0:
            return False
        key = (n, j)
        if key in self._vg:
            return self._vg[key]
        if n <= self.consts.n0:
            self._vg[key] = True
            return True
        word = self.word_of_branch(n, j)
        if word is None:
            self._vg[key] = False
            self._bad[key] = False  # unresolved: graded neither
            return False
        label = self.landing_label(n - 1, word)
        excellent = label.label in ("Excellent", "Cool")
        ok = False
        if excellent:
            lv = self.level(n)
            b = lv.branch(j)
            dist = b.distance_to_zero
            cn_prev = self.c(n - 1)
            ok = dist > cn_prev ** ((n - 1) ** 2) * lv.halfwidth
        self._vg[key] = ok
        return ok

    def bad(self, n: int, j: int) -> bool:
        if j == 0:
            return False
        key = (n, j)
        if key in self._bad:
            return self._bad[key]
        if n <= self.consts.n0:
            self._bad[key] = False
            return False
        if self.very_good(n, j):
            self._bad[key] = False
            return False
        if key in self._bad:  # may have been pinned by very_good
            return self._bad[key]
        word = self.word_of_branch(n, j)
        if word is None:
            self._bad[key] = False
            return False
        fast = self._clause_LF1(n - 1, word) and self._clause_LS2(n - 1, word)
        self._bad[key] = not fast
        return self._bad[key]

    # ---- good returns --------------------------------------------------------

    def good(self, n: int, j: int) -> tuple[Optional[bool], Optional[str]]:
        lam0 = self._lambda_base
        n0 = self.consts.n0
        if not self.lam(n, j) >= lam0 * (1 + 2.0 ** (n0 - n)) / 2:
            return False, "G1"
        # G2: truncated-time expansion.  The lower threshold degenerates to
        # +inf at n = 1 (empty range).
        if n == 1:
            return True, None
        cprev = self.c(n - 1)
        k_lo = cprev ** (-3.0 / (n - 1))
        r = self.r(n, j)
        if k_lo > r:
            return True, None
        if r > self.g2_time_cap:
            return None, "G2:time-cap"
        thr = lam0 * (1 + 2.0 ** (n0 - n + 0.5)) / 2 - cprev ** (2.0 / (n - 1))
        b = self.level(n).branch(j)
        xs = np.linspace(b.lo, b.hi, self.grid)
        y = xs.copy()
        with np.errstate(divide="ignore"):
            acc = np.zeros_like(xs)
            for k in range(1, r + 1):
                acc = acc + np.log(np.abs(self.m.df_np(y)))
                y = self.m.f_np(y)
                if k >= k_lo:
                    if float(acc.min()) / k < thr:
                        return False, "G2"
        return True, None

    def return_label(self, n: int, j: int) -> ReturnLabel:
        vg = self.very_good(n, j)
        bd = self.bad(n, j)
        gd, gw = self.good(n, j)
        if vg:
            return ReturnLabel("VeryGood", vg, bd, gd, None)
        if bd:
            return ReturnLabel("Bad", vg, bd, gd, "VG")
        if gd:
            return ReturnLabel("Good", vg, bd, gd, gw or "VG")
        return ReturnLabel("Neither", vg, bd, gd, gw or "VG")


def classify_branches(
    m: MapInstance,
    nest_result: NestResult | Sequence[NestLevel],
    words: Sequence[tuple[int, Sequence[int]]] = (),
    consts: Optional[ClassifierConstants] = None,
    grid: int = 64,
    label_levels: Optional[Sequence[int]] = None,
) -> BranchTaxonomy:
    """Grade the supplied (level, word) landings plus every enumerated
    branch on the requested levels.

    Raises InsufficientDepth when a clause needs nest data beyond the built
    levels (e.g. the scaling factor of an unextended level)."""
    if consts is None:
        levels = (
            nest_result.levels
            if isinstance(nest_result, NestResult)
            else list(nest_result)
        )
        consts = ClassifierConstants(n0=choose_n0(levels))
    eng = _TaxonomyEngine(m, nest_result, consts, grid=grid)
    landings = {}
    for n, word in words:
        landings[(n, tuple(word))] = eng.landing_label(n, word)
    returns = {}
    if label_levels is None:
        label_levels = sorted(eng.levels)
    for n in label_levels:
        lv = eng.levels.get(n)
        if lv is None:
            continue
        for b in lv.branches:
            try:
                returns[(n, b.j)] = eng.return_label(n, b.j)
            except InsufficientDepth:
                continue
    return BranchTaxonomy(
        constants=consts,
        lambda_base=eng._lambda_base,
        landings=landings,
        returns=returns,
    )
