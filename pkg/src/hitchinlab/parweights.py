"""Exact rational calculus of limiting-configuration weights.

Everything here uses :class:`fractions.Fraction`; no floating point value is
ever produced.  The central objects are the per-zero function

    chi_P(a) = (m_P + 1) * (a - a_P)   for 0 <= a <= a_P,   0 otherwise,

with ``a_P = ell_P / (2 (m_P + 1))``, and the balancing parameter ``a*`` that
solves ``d1 - degE/2 + sum_P chi_P(a*) = 0``.  The weights of the two limiting
line bundles at ``P`` are ``-chi_P(a*)`` and ``chi_P(a*) + ell_P``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

Rational = Union[int, Fraction]

STABLE = "stable"
SEMISTABLE = "semistable"
UNSTABLE = "unstable"


class WeightError(ValueError):
    """Raised for invalid or unstable spectral data."""


def _q(x) -> Fraction:
    if isinstance(x, float):
        raise TypeError("floats are not accepted; pass int, Fraction or 'p/q' strings")
    return Fraction(x)


def fraction_to_json(x: Fraction) -> dict:
    x = Fraction(x)
    return {"num": x.numerator, "den": x.denominator}


def fraction_from_json(obj) -> Fraction:
    if isinstance(obj, dict):
        return Fraction(int(obj["num"]), int(obj["den"]))
    if isinstance(obj, float):
        raise TypeError("floats are not accepted for exact quantities")
    return Fraction(obj)


@dataclass(frozen=True)
class ZeroDatum:
    """A zero ``P`` of the eigenvalue one-form: order ``m`` and twist ``ell``."""

    label: str
    m: int
    ell: int

    def __post_init__(self):
        if int(self.m) != self.m or int(self.ell) != self.ell:
            raise WeightError("m and ell must be integers")
        if self.m < 0:
            raise WeightError(f"zero {self.label}: m must be nonnegative")
        if not 0 <= self.ell <= self.m:
            raise WeightError(f"zero {self.label}: need 0 <= ell <= m, got ell={self.ell}, m={self.m}")

    @property
    def a_P(self) -> Fraction:
        return Fraction(self.ell, 2 * (self.m + 1))


@dataclass(frozen=True)
class GlobalSpectralSpec:
    zeros: Tuple[ZeroDatum, ...]
    degE: int
    d1: int
    d2: int

    def __post_init__(self):
        object.__setattr__(self, "zeros", tuple(self.zeros))
        labels = [z.label for z in self.zeros]
        if len(set(labels)) != len(labels):
            raise WeightError("zero labels must be distinct")
        if self.d1 > self.d2:
            raise WeightError("need d1 <= d2")
        total_ell = sum(z.ell for z in self.zeros)
        if self.d1 + self.d2 - total_ell != self.degE:
            raise WeightError(
                f"degree constraint violated: d1 + d2 - sum(ell) = {self.d1 + self.d2 - total_ell} != degE = {self.degE}"
            )

    @property
    def half_degree(self) -> Fraction:
        return Fraction(self.degE, 2)

    @property
    def a_max(self) -> Fraction:
        return max((z.a_P for z in self.zeros), default=Fraction(0))

    @classmethod
    def from_json(cls, obj: Mapping) -> "GlobalSpectralSpec":
        zeros = []
        for k, z in enumerate(obj["zeros"]):
            zeros.append(ZeroDatum(str(z.get("label", f"P{k}")), int(z["m"]), int(z["ell"])))
        return cls(tuple(zeros), int(obj["degE"]), int(obj["d1"]), int(obj["d2"]))

    def to_json(self) -> dict:
        return {
            "degE": self.degE,
            "d1": self.d1,
            "d2": self.d2,
            "zeros": [{"label": z.label, "m": z.m, "ell": z.ell} for z in self.zeros],
        }


@dataclass(frozen=True)
class WeightAssignment:
    a_star: Fraction
    weight1: Dict[str, Fraction]
    weight2: Dict[str, Fraction]
    degree1: Fraction
    degree2: Fraction

    def to_json(self) -> dict:
        return {
            "a_star": fraction_to_json(self.a_star),
            "weights": [
                {"label": p, "weight1": fraction_to_json(self.weight1[p]), "weight2": fraction_to_json(self.weight2[p])}
                for p in self.weight1
            ],
            "parabolic_degree1": fraction_to_json(self.degree1),
            "parabolic_degree2": fraction_to_json(self.degree2),
        }

    def to_csv(self) -> str:
        """Weight table as numeric CSV; rows follow the order of the zeros."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["zero_index", "weight1_num", "weight1_den", "weight2_num", "weight2_den"])
        for k, p in enumerate(self.weight1):
            a, b = self.weight1[p], self.weight2[p]
            w.writerow([k, a.numerator, a.denominator, b.numerator, b.denominator])
        return buf.getvalue()


@dataclass(frozen=True)
class FilteredLineBundle:
    """A line bundle of degree ``degree`` with weight ``b_P`` at each marked point."""

    degree: int
    weights: Mapping[str, Fraction] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "weights", {str(k): _q(v) for k, v in dict(self.weights).items()})


@dataclass(frozen=True)
class JumpData:
    """Filtered bundle of any rank, described at a reference level.

    ``degree`` is the ordinary degree of the lattice at the reference level
    ``reference[P]``; ``jumps[P]`` lists ``(a, multiplicity)`` for the jumps of
    the filtration at ``P`` lying in ``(reference[P] - 1, reference[P]]``.
    """

    degree: int
    reference: Mapping[str, Fraction]
    jumps: Mapping[str, Sequence[Tuple[Fraction, int]]]

    def __post_init__(self):
        ref = {str(k): _q(v) for k, v in dict(self.reference).items()}
        jumps = {}
        for p, lst in dict(self.jumps).items():
            p = str(p)
            if p not in ref:
                raise WeightError(f"jump data for {p} has no reference level")
            entries = []
            for a, mult in lst:
                a = _q(a)
                if int(mult) != mult or mult <= 0:
                    raise WeightError(f"multiplicity at {p} must be a positive integer")
                if not (ref[p] - 1 < a <= ref[p]):
                    raise WeightError(f"jump {a} at {p} outside ({ref[p] - 1}, {ref[p]}]")
                entries.append((a, int(mult)))
            jumps[p] = tuple(entries)
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "jumps", jumps)

    @property
    def rank_at(self) -> Dict[str, int]:
        return {p: sum(m for _, m in lst) for p, lst in self.jumps.items()}


# ----------------------------------------------------------------------------
# chi and the balancing parameter


def chi_P(datum: ZeroDatum, a: Rational) -> Fraction:
    a = _q(a)
    if a < 0:
        raise WeightError("chi_P is defined for a >= 0")
    if a <= datum.a_P:
        return (datum.m + 1) * (a - datum.a_P)
    return Fraction(0)


def chi_total(spec: GlobalSpectralSpec, a: Rational) -> Fraction:
    return sum((chi_P(z, a) for z in spec.zeros), Fraction(0))


def balance(spec: GlobalSpectralSpec, a: Rational) -> Fraction:
    """The left side ``d1 - degE/2 + chi(a)`` of the balancing equation."""
    return spec.d1 - spec.half_degree + chi_total(spec, a)


def stability_check(spec_or_local) -> str:
    """Stability verdict for a global spec or a local ``(c, ell)`` pair."""
    if isinstance(spec_or_local, GlobalSpectralSpec):
        s = spec_or_local
        margins = [s.d1 - s.half_degree, s.d2 - s.half_degree]
    else:
        c, ell = spec_or_local
        c = _q(c)
        # degrees of the saturated sub line bundles are -ell - c_i
        margins = [-c, c + ell]
    if all(x > 0 for x in margins):
        return STABLE
    if all(x >= 0 for x in margins):
        return SEMISTABLE
    return UNSTABLE


def solve_a(spec: GlobalSpectralSpec) -> Fraction:
    """Unique root ``a*`` in ``[0, max a_P)`` of the balancing equation."""
    if stability_check(spec) != STABLE:
        raise WeightError("spectral data is not stable (need d_j - degE/2 > 0)")
    breaks = sorted({Fraction(0)} | {z.a_P for z in spec.zeros})
    values = [balance(spec, b) for b in breaks]
    if values[0] == 0:
        return Fraction(0)
    if values[0] > 0 or values[-1] <= 0:  # impossible for consistent stable data
        raise WeightError("balancing equation has no root in [0, max a_P)")
    for lo, hi, f_lo, f_hi in zip(breaks, breaks[1:], values, values[1:]):
        if f_lo < 0 < f_hi or f_hi == 0:
            if f_hi == 0:
                # root exactly at a breakpoint only if it is the left end of a flat part;
                # f is strictly increasing below max a_P, so hi < max a_P here
                return hi
            slope = sum((z.m + 1 for z in spec.zeros if z.a_P > lo), 0)
            return lo - f_lo / slope
    raise WeightError("failed to bracket the root")  # pragma: no cover


def weights(spec: GlobalSpectralSpec) -> WeightAssignment:
    a = solve_a(spec)
    w1 = {z.label: -chi_P(z, a) for z in spec.zeros}
    w2 = {z.label: chi_P(z, a) + z.ell for z in spec.zeros}
    deg1 = parabolic_degree(FilteredLineBundle(spec.d1, w1))
    deg2 = parabolic_degree(FilteredLineBundle(spec.d2, w2))
    return WeightAssignment(a, w1, w2, deg1, deg2)


def bisection_a(spec: GlobalSpectralSpec, resolution: int = 10**6) -> Fraction:
    """Slow oracle: scan a rational grid of ``[0, max a_P]`` and bisect on it.

    Returns the exact root when it lies on the grid, otherwise the left grid
    point of the bracketing cell.
    """
    amax = spec.a_max
    if amax == 0:
        raise WeightError("no positive breakpoints")
    lo, hi = 0, resolution
    step = amax / resolution
    if balance(spec, 0) >= 0:
        return Fraction(0)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if balance(spec, mid * step) < 0:
            lo = mid
        else:
            hi = mid
    if balance(spec, hi * step) == 0:
        return hi * step
    return lo * step


# ----------------------------------------------------------------------------
# filtered line bundles


def lattice_level(bundle: FilteredLineBundle, a: Mapping[str, Rational]) -> Dict[str, int]:
    """Integers ``n_P`` with ``a_P - 1 < n_P + b_P <= a_P``."""
    out = {}
    for p, ap in dict(a).items():
        b = bundle.weights.get(str(p), Fraction(0))
        out[str(p)] = math.floor(_q(ap) - b)
    return out


def line_bundle_jumps(bundle: FilteredLineBundle, reference: Mapping[str, Rational]) -> JumpData:
    """Describe a filtered line bundle at the reference level ``reference``."""
    ref = {str(k): _q(v) for k, v in dict(reference).items()}
    for p in bundle.weights:
        ref.setdefault(p, Fraction(0))
    n = lattice_level(bundle, ref)
    degree = bundle.degree + sum(n.values())
    jumps = {p: [(n[p] + bundle.weights.get(p, Fraction(0)), 1)] for p in ref}
    return JumpData(degree, ref, jumps)


def parabolic_degree(bundle: Union[FilteredLineBundle, JumpData]) -> Fraction:
    """Parabolic degree: ordinary degree minus weighted jump multiplicities."""
    if isinstance(bundle, FilteredLineBundle):
        return bundle.degree - sum(bundle.weights.values(), Fraction(0))
    if isinstance(bundle, JumpData):
        total = Fraction(bundle.degree)
        for lst in bundle.jumps.values():
            for a, mult in lst:
                total -= a * mult
        return total
    raise TypeError(f"unsupported bundle type {type(bundle).__name__}")


def degree_level_integral(bundle: FilteredLineBundle, point: str) -> Fraction:
    """Exact integral over ``b`` in ``[0, 1]`` of the degree of the bundle whose
    lattice at ``point`` is frozen at level ``b`` (other points stay filtered).

    The integrand is piecewise constant in ``b``; it jumps where the lattice
    level at ``point`` changes.
    """
    point = str(point)
    w = bundle.weights.get(point, Fraction(0))
    others = sum((v for k, v in bundle.weights.items() if k != point), Fraction(0))
    # level n(b) = floor(b - w) changes at b = w + k; the only such break in (0, 1)
    # is the fractional part of w
    frac = w - math.floor(w)
    cuts = sorted({Fraction(0), Fraction(1)} | ({frac} if frac > 0 else set()))
    total = Fraction(0)
    for lo, hi in zip(cuts, cuts[1:]):
        n = math.floor(lo - w)
        total += (hi - lo) * (bundle.degree + n - others)
    return total


def degree_level_formula(bundle: FilteredLineBundle, point: str) -> Fraction:
    """Right side of the level-integral identity: the degree at level 0 minus
    ``(a_i - 1)`` times the jump multiplicity, for the jump ``a_i`` in ``(0, 1]``."""
    point = str(point)
    w = bundle.weights.get(point, Fraction(0))
    others = sum((v for k, v in bundle.weights.items() if k != point), Fraction(0))
    n0 = math.floor(-w)
    deg0 = bundle.degree + n0 - others
    jump = n0 + 1 + w  # the jump of the filtration at the point lying in (0, 1]
    return deg0 - (jump - 1)


def local_weights(c: Rational, ell: int) -> Tuple[Fraction, Fraction]:
    """Local model weights ``(c1, c2) = (c, -c - ell)``."""
    c = _q(c)
    return c, -c - ell


def random_stable_spec(rng, n_zeros_max: int = 5, m_max: int = 5, deg_range: int = 6) -> GlobalSpectralSpec:
    """Draw a random stable spec (used by tests and the CLI sweeps)."""
    while True:
        k = int(rng.integers(1, n_zeros_max + 1))
        zeros = []
        for i in range(k):
            m = int(rng.integers(0, m_max + 1))
            ell = int(rng.integers(0, m + 1))
            zeros.append(ZeroDatum(f"P{i}", m, ell))
        total = sum(z.ell for z in zeros)
        degE = int(rng.integers(-deg_range, deg_range + 1))
        # d1 in (degE/2, (degE + total)/2]
        lo = math.floor(Fraction(degE, 2)) + 1
        hi = math.floor(Fraction(degE + total, 2))
        if lo > hi:
            continue
        d1 = int(rng.integers(lo, hi + 1))
        d2 = degE + total - d1
        return GlobalSpectralSpec(tuple(zeros), degE, d1, d2)


def spec_from_pairs(pairs: Iterable[Tuple[int, int]], degE: int, d1: int, d2: int) -> GlobalSpectralSpec:
    zeros: List[ZeroDatum] = [ZeroDatum(f"P{i}", m, ell) for i, (m, ell) in enumerate(pairs)]
    return GlobalSpectralSpec(tuple(zeros), degE, d1, d2)
