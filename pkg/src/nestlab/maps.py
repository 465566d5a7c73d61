"""Built-in unimodal map families on a symmetric interval.

All instances are even maps of [-H, H] with the unique critical point at 0
and boundary going to the left endpoint.  Built-ins carry closed-form jets
up to third order, so the Schwarzian and derivative products are exact up
to roundoff.

Families
--------
quadratic    x |-> a - x^2 on [-beta_a, beta_a], a in [-1/4, 2], with
             beta_a = (1 + sqrt(1+4a))/2 the fixed left-boundary point.
nquadratic   the affine rescaling of `quadratic` to [-1, 1], parametrized
             by t in [-1, 1] via a = 7/8 + (9/8) t.
pquadratic   nquadratic plus eps*(1-x^2)^2: an even analytic perturbation
             that keeps the boundary values and the critical point.
custom       -1 + sum_k c_k (1-x^2)^k for user coefficient lists; gated by
             verify_s_unimodal at parse time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AtCriticalPoint, EscapedDomain, OutOfDomain
from .numerics import DOUBLE, LogProduct, Precision, accumulate_log_derivative


def beta_of_a(a):
    """Positive boundary fixed point of x |-> a - x^2."""
    return (1 + (1 + 4 * a) ** 0.5) / 2


def a_of_t(t):
    return 7.0 / 8.0 + (9.0 / 8.0) * t


def t_of_a(a):
    return (8.0 * a - 7.0) / 9.0


@dataclass(frozen=True)
class MapInstance:
    """One evaluable map with jets.

    jet(x) returns (f, Df, D2f, D3f) as working-precision scalars.  The
    numpy evaluators f_np / df_np are double-precision fast paths used by
    the grid machinery.
    """

    family_id: str
    params: tuple
    halfwidth: float
    jet: Callable
    f_np: Callable
    df_np: Callable
    velocity_exact: Optional[Callable] = None
    precision: Precision = DOUBLE
    label: str = ""

    def __call__(self, x):
        return self.jet(x)[0]

    def deriv(self, x):
        return self.jet(x)[1]

    @property
    def domain(self) -> tuple[float, float]:
        return (-self.halfwidth, self.halfwidth)

    def check_domain(self, x):
        H = self.halfwidth
        slack = 10 * self.precision.epsilon * max(1.0, H)
        if abs(x) > H + slack:
            raise OutOfDomain(f"x={x!r} outside [-{H}, {H}]")

    def spec(self) -> str:
        """Round-trippable family spec string."""
        return self.label


def evaluate_jet(m: MapInstance, x):
    """Jet (f, Df, D2f, D3f) at x, with the domain precondition enforced."""
    m.check_domain(x)
    return m.jet(x)


def _quadratic_instance(a: float, precision: Precision) -> MapInstance:
    if not -0.25 <= a <= 2.0:
        raise ValueError(f"quadratic parameter a={a} outside [-1/4, 2]")
    with precision.active():
        aw = precision.real(a)
        beta = beta_of_a(aw)
        negtwo = precision.real(-2.0)
        zero = precision.real(0.0)

        def jet(x):
            return (aw - x * x, -2 * x, negtwo, zero)

    def f_np(x):
        return a - x * x

    def df_np(x):
        return -2.0 * x

    def velocity(direction, x):
        # d/da (a - x^2) = 1 identically
        return direction[0]

    return MapInstance(
        family_id="quadratic",
        params=(a,),
        halfwidth=float(beta),
        jet=jet,
        f_np=f_np,
        df_np=df_np,
        velocity_exact=velocity,
        precision=precision,
        label=f"quadratic:a={a!r}",
    )


def _nquadratic_jet(a, precision: Precision):
    with precision.active():
        aw = precision.real(a)
        beta = beta_of_a(aw)
        c0 = aw / beta  # f(0)
        neg2b = -2 * beta
        zero = precision.real(0.0)

        # (x*x) grouping kept identical to f_np so scalar and vector paths
        # round the same way
        def jet(x):
            return (c0 - beta * (x * x), neg2b * x, neg2b, zero)

    return jet, float(beta), float(c0)


def _dp_da(a, beta, x2):
    """d/da of the normalized quadratic, exact: beta' = 1/(2 beta - 1)."""
    bp = 1.0 / (2.0 * beta - 1.0)
    return 1.0 / beta - a * bp / (beta * beta) - bp * x2


def _nquadratic_instance(t: float, precision: Precision) -> MapInstance:
    a = a_of_t(t)
    if not -0.25 - 1e-12 <= a <= 2.0 + 1e-12:
        raise ValueError(f"nquadratic parameter t={t} maps to a={a} outside [-1/4, 2]")
    jet, beta, c0 = _nquadratic_jet(a, precision)

    def f_np(x):
        return c0 - beta * (x * x)

    def df_np(x):
        return (-2.0 * beta) * x

    def velocity(direction, x):
        # chain rule through a = 7/8 + 9/8 t
        return direction[0] * (9.0 / 8.0) * _dp_da(a, beta, float(x) ** 2)

    return MapInstance(
        family_id="nquadratic",
        params=(t,),
        halfwidth=1.0,
        jet=jet,
        f_np=f_np,
        df_np=df_np,
        velocity_exact=velocity,
        precision=precision,
        label=f"nquadratic:t={t!r}",
    )


def _pquadratic_instance(a: float, eps: float, precision: Precision) -> MapInstance:
    qjet, beta, c0 = _nquadratic_jet(a, precision)
    with precision.active():
        e = precision.real(eps)

        def jet(x):
            f0, f1, f2, _ = qjet(x)
            x2 = x * x
            u = 1 - x2
            return (
                f0 + e * u * u,
                f1 + e * (-4 * x * u),
                f2 + e * (-4 + 12 * x2),
                24 * e * x,
            )

    def f_np(x):
        u = 1.0 - (x * x)
        return (c0 - beta * (x * x)) + eps * u * u

    def df_np(x):
        return (-2.0 * beta) * x + eps * (-4.0 * x * (1.0 - x * x))

    def velocity(direction, x):
        x2 = float(x) ** 2
        u = 1.0 - x2
        return direction[0] * _dp_da(a, beta, x2) + direction[1] * u * u

    return MapInstance(
        family_id="pquadratic",
        params=(a, eps),
        halfwidth=1.0,
        jet=jet,
        f_np=f_np,
        df_np=df_np,
        velocity_exact=velocity,
        precision=precision,
        label=f"pquadratic:a={a!r},eps={eps!r}",
    )


def _custom_instance(coeffs: Sequence[float], precision: Precision) -> MapInstance:
    """-1 + sum_{k>=1} c_k (1-x^2)^k.  Evenness, boundary values and the
    critical point at 0 hold by construction; S-unimodality does not and is
    checked by the caller (verify_s_unimodal)."""
    c = tuple(float(v) for v in coeffs)
    if not c:
        raise ValueError("custom family needs at least one coefficient")
    # P(u) = sum c_k u^k, plus derivatives in u
    pc = np.array([0.0] + list(c))

    def _p(u, arr):
        tot = 0.0 * u
        for coef in arr[::-1]:
            tot = tot * u + coef
        return tot

    d1 = np.polynomial.polynomial.polyder(pc)
    d2 = np.polynomial.polynomial.polyder(pc, 2)
    d3 = np.polynomial.polynomial.polyder(pc, 3)

    def jet(x):
        x = float(x)
        u = 1.0 - x * x
        q = _p(u, d1)
        qp = _p(u, d2)
        qpp = _p(u, d3)
        f = -1.0 + _p(u, pc)
        df = -2.0 * x * q
        d2f = -2.0 * q + 4.0 * x * x * qp
        d3f = 12.0 * x * qp - 8.0 * x ** 3 * qpp
        return (f, df, d2f, d3f)

    def f_np(x):
        u = 1.0 - x * x
        return -1.0 + _p(u, pc)

    def df_np(x):
        u = 1.0 - x * x
        return -2.0 * x * _p(u, d1)

    def velocity(direction, x):
        # d f / d c_k = (1-x^2)^k exactly
        u = 1.0 - float(x) ** 2
        return sum(d * u ** (k + 1) for k, d in enumerate(direction))

    label = "custom:" + ",".join(f"c{k+1}={v!r}" for k, v in enumerate(c))
    return MapInstance(
        family_id="custom",
        params=c,
        halfwidth=1.0,
        jet=jet,
        f_np=f_np,
        df_np=df_np,
        velocity_exact=velocity,
        precision=precision,
        label=label,
    )


_FAMILY_DIMS = {"quadratic": 1, "nquadratic": 1, "pquadratic": 2, "custom": None}


def make_instance(
    family_id: str, params: Sequence[float], precision: Precision = DOUBLE
) -> MapInstance:
    params = tuple(float(p) for p in params)
    if family_id == "quadratic":
        return _quadratic_instance(params[0], precision)
    if family_id == "nquadratic":
        return _nquadratic_instance(params[0], precision)
    if family_id == "pquadratic":
        return _pquadratic_instance(params[0], params[1], precision)
    if family_id == "custom":
        return _custom_instance(params, precision)
    raise ValueError(f"unknown family {family_id!r}")


def parse_family_spec(spec: str, precision: Precision = DOUBLE) -> MapInstance:
    """Parse 'quadratic:a=2', 'nquadratic:t=1', 'pquadratic:a=1.8,eps=0.05'
    or 'custom:c1=2,c2=-0.1' into a map instance."""
    try:
        name, _, arglist = spec.partition(":")
        kv = {}
        for item in arglist.split(","):
            if not item:
                continue
            k, _, v = item.partition("=")
            kv[k.strip()] = float(v)
    except ValueError as exc:
        raise ValueError(f"bad family spec {spec!r}: {exc}") from None
    name = name.strip()
    if name == "quadratic":
        return _quadratic_instance(kv["a"], precision)
    if name == "nquadratic":
        if "t" in kv:
            return _nquadratic_instance(kv["t"], precision)
        if "a" in kv:
            return _nquadratic_instance(t_of_a(kv["a"]), precision)
        raise ValueError("nquadratic spec needs t= or a=")
    if name == "pquadratic":
        return _pquadratic_instance(kv.get("a", 2.0), kv.get("eps", 0.0), precision)
    if name == "custom":
        ks = sorted(kv, key=lambda s: int(s.lstrip("c")))
        coeffs = [kv[k] for k in ks]
        return _custom_instance(coeffs, precision)
    raise ValueError(f"unknown family {name!r}")


def schwarzian(m: MapInstance, x):
    """S f = D3f/Df - (3/2)(D2f/Df)^2; undefined at the critical point."""
    m.check_domain(x)
    if abs(x) < 1e3 * m.precision.epsilon * max(1.0, m.halfwidth):
        raise AtCriticalPoint(f"Schwarzian undefined at x={x!r}")
    _, d1, d2, d3 = m.jet(x)
    if d1 == 0:
        raise AtCriticalPoint(f"Df vanishes at x={x!r}")
    r = d2 / d1
    return d3 / d1 - 1.5 * r * r


@dataclass(frozen=True)
class OrbitSegment:
    """Critical-orbit prefix with derivative products along the critical value.

    points[k] = f^k(0); log_derivatives[k] = Df^k(f(0)) in log form, i.e. the
    product of Df over points[1..k] (empty for k=0).
    """

    points: tuple
    log_derivatives: tuple[LogProduct, ...]


def iterate_orbit(m: MapInstance, x0, n: int):
    """Forward orbit x0, f(x0), ..., f^n(x0) as a list; raises EscapedDomain
    if an iterate leaves the interval beyond roundoff slack."""
    H = m.halfwidth
    slack = 10 * m.precision.epsilon * max(1.0, H)
    with m.precision.active():
        x = m.precision.real(x0)
        pts = [x]
        for k in range(n):
            x = m.jet(x)[0]
            if abs(x) > H + slack:
                raise EscapedDomain(
                    f"orbit left the interval at iterate {k + 1}: x={float(x)!r}"
                )
            pts.append(x)
    return pts


def iterate_critical_orbit(m: MapInstance, n: int) -> OrbitSegment:
    """Orbit of the critical point with Df^k(f(0)) accumulated in log form."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = iterate_orbit(m, 0.0, n)
    logs = [LogProduct()]
    acc = LogProduct()
    for k in range(1, n):
        acc = acc.times(m.jet(pts[k])[1])
        logs.append(acc)
    return OrbitSegment(points=tuple(pts), log_derivatives=tuple(logs))


def derivative_along_orbit(m: MapInstance, x, n: int) -> LogProduct:
    """Df^n(x) in log form (product of Df over x, f(x), ..., f^{n-1}(x))."""
    with m.precision.active():
        y = m.precision.real(x)
        acc = LogProduct()
        for _ in range(n):
            f, d1, _, _ = m.jet(y)
            acc = acc.times(d1)
            y = f
    return acc


def family_velocity(m: MapInstance, direction: Sequence[float], x):
    """Directional derivative of the family map in parameter space at x.

    Exact closed forms for the built-ins; central finite differences with
    step epsilon^(1/3) otherwise.
    """
    direction = tuple(float(d) for d in direction)
    if not any(direction):
        raise ValueError("direction must be nonzero")
    if len(direction) != len(m.params):
        raise ValueError(
            f"direction has {len(direction)} components, family has {len(m.params)}"
        )
    m.check_domain(x)
    if m.velocity_exact is not None:
        return m.velocity_exact(direction, x)
    return family_velocity_fd(m, direction, x)


def family_velocity_fd(m: MapInstance, direction: Sequence[float], x, h=None):
    """Finite-difference velocity; also used to cross-check the closed forms."""
    if h is None:
        h = m.precision.epsilon ** (1.0 / 3.0)
    norm = math.sqrt(sum(d * d for d in direction))
    unit = [d / norm for d in direction]
    p_plus = [p + h * u for p, u in zip(m.params, unit)]
    p_minus = [p - h * u for p, u in zip(m.params, unit)]
    f_plus = make_instance(m.family_id, p_plus, m.precision)
    f_minus = make_instance(m.family_id, p_minus, m.precision)
    return norm * (f_plus(x) - f_minus(x)) / (2 * h)


@dataclass(frozen=True)
class SUnimodalReport:
    """Grid report of the S-unimodal checks; failures are entries, not errors."""

    checks: dict
    grid_size: int

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    @property
    def failures(self) -> list[str]:
        return [name for name, (ok, _) in self.checks.items() if not ok]


def verify_s_unimodal(
    m: MapInstance, grid_size: int = 1000, hole: float = 0.01
) -> SUnimodalReport:
    """Check evenness, boundary behaviour, unimodality, a non-degenerate
    critical point and negative Schwarzian on a grid."""
    if grid_size < 100:
        raise ValueError("grid_size must be >= 100")
    H = m.halfwidth
    eps = m.precision.epsilon
    tol = 10 * eps * max(1.0, H)
    xs = np.linspace(-H, H, grid_size)
    checks: dict = {}

    fv = np.array([float(m(float(x))) for x in xs])
    fneg = np.array([float(m(float(-x))) for x in xs])
    worst_even = float(np.max(np.abs(fv - fneg)))
    checks["evenness"] = (worst_even <= tol, f"max |f(-x)-f(x)| = {worst_even:.3e}")

    b = float(m(H))
    checks["boundary_value"] = (abs(b + H) <= tol, f"f(H) = {b!r}")
    db = float(m.deriv(-H))
    checks["boundary_derivative"] = (db >= 1.0 - 1e3 * eps, f"Df(-H) = {db!r}")

    _, d1_0, d2_0, _ = m.jet(0.0)
    checks["critical_point"] = (
        abs(float(d1_0)) <= tol and abs(float(d2_0)) > tol,
        f"Df(0) = {float(d1_0)!r}, D2f(0) = {float(d2_0)!r}",
    )

    inside = np.abs(fv) <= H + tol
    checks["maps_into_interval"] = (
        bool(inside.all()),
        f"{int((~inside).sum())} grid values leave the interval",
    )

    interior = xs[(np.abs(xs) > tol) & (np.abs(xs) < H)]
    dv = np.array([float(m.deriv(float(x))) for x in interior])
    uni_ok = bool(np.all(dv[interior < 0] > 0) and np.all(dv[interior > 0] < 0))
    checks["unimodality"] = (
        uni_ok,
        "Df changes sign only at 0" if uni_ok else "Df has interior zeros",
    )

    sgrid = interior[np.abs(interior) >= hole * H]
    sf = np.array([float(schwarzian(m, float(x))) for x in sgrid])
    neg = bool(np.all(sf < 0))
    checks["schwarzian_negative"] = (
        neg,
        f"max Sf = {float(sf.max()):.3e}" if len(sf) else "no points checked",
    )

    return SUnimodalReport(checks=checks, grid_size=grid_size)


def log_derivative_products(m: MapInstance, points: Sequence) -> LogProduct:
    """Product of Df over the given orbit points, in log form."""
    return accumulate_log_derivative(m.jet(p)[1] for p in points)
