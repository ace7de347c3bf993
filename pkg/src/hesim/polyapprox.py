"""Polynomial approximation and depth-exact homomorphic evaluation.

Fits are Chebyshev interpolants at Chebyshev nodes (deterministic, close to
minimax).  Homomorphic evaluation uses a baby-step giant-step recursion that
consumes exactly ceil(log2(degree+1)) levels while keeping ciphertext by
ciphertext multiplications in O(sqrt(degree)):

* baby powers are shared through one memoized cache, each power built from
  its halves so its own depth is ceil(log2 j);
* a flat block of degree <= bs is finished with a single fused
  multiply-accumulate (pc_linear), costing one level on top of the powers;
* larger blocks split at the leading power of two, the high part is
  evaluated one level shallower and multiplied back in.

Coefficients may be scalars or per-slot plaintext vectors; both bases
(monomial and Chebyshev) share the engine, the Chebyshev split folding its
product cross-terms into the remainder coefficients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import chebyshev as C

from .slotsim import NeedsBootstrapError, SimCiphertext, SimPlaintext, SlotContext

MONOMIAL = "monomial"
CHEBYSHEV = "chebyshev"


@dataclass
class ApproxPoly:
    coeffs: np.ndarray
    basis: str
    interval: tuple[float, float]
    target_fn: str = ""
    sup_error: float | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.basis not in (MONOMIAL, CHEBYSHEV):
            raise ValueError(f"unknown basis {self.basis!r}")
        lo, hi = self.interval
        if not lo < hi:
            raise ValueError("interval must satisfy lo < hi")
        self.interval = (float(lo), float(hi))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def to_dict(self) -> dict:
        return {"basis": self.basis, "interval": list(self.interval),
                "coeffs": self.coeffs.tolist(), "target_fn": self.target_fn,
                "sup_error": self.sup_error}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ApproxPoly":
        return cls(np.asarray(d["coeffs"], dtype=float), d["basis"],
                   tuple(d["interval"]), d.get("target_fn", ""), d.get("sup_error"))

    @classmethod
    def from_json(cls, path) -> "ApproxPoly":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- reference targets and operating ranges -----------------------------------

def silu(x):
    return x / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def inv_sqrt(x):
    return 1.0 / np.sqrt(x)


TARGET_FNS: dict[str, Callable] = {"exp": np.exp, "silu": silu, "invsqrt": inv_sqrt}


@dataclass(frozen=True)
class RangeTable:
    """Operating intervals the approximants are fit over.

    softmax_max_abs is the largest |score| the exp input can reach before
    pre-scaling; with halving_steps range-halvings the exp approximant only
    has to cover [-softmax_max_abs / 2^halving_steps, 0].
    """

    silu_narrow: tuple[float, float] = (-16.0, 16.0)
    silu_wide: tuple[float, float] = (-24.0, 24.0)
    invsqrt: tuple[float, float] = (1.0 / math.sqrt(30.0), math.sqrt(30.0))
    softmax_max_abs: float = 32.78
    halving_steps: int = 2

    @property
    def softmax_exp(self) -> tuple[float, float]:
        return (-self.softmax_max_abs / 2 ** self.halving_steps, 0.0)

    def interval_for(self, fn: str) -> tuple[float, float]:
        return {"exp": self.softmax_exp, "silu": self.silu_wide,
                "invsqrt": self.invsqrt}[fn]


# -- fitting -------------------------------------------------------------------

def chebyshev_fit(f: Callable, interval: tuple[float, float], degree: int,
                  target_fn: str = "") -> ApproxPoly:
    """Interpolate f at the degree+1 Chebyshev nodes of the interval.

    sup_error is measured against f on a dense grid of 10*degree points.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ValueError("interval must satisfy lo < hi")
    if degree < 0:
        raise ValueError("degree must be non-negative")
    nodes = np.cos(np.pi * (2 * np.arange(degree + 1) + 1) / (2 * (degree + 1)))
    nodes = lo + (hi - lo) * (nodes + 1) / 2
    vals = np.asarray(f(nodes), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("target function is not finite at an interpolation node")
    series = C.Chebyshev.interpolate(f, degree, domain=[lo, hi])
    grid = np.linspace(lo, hi, max(10 * degree, 10))
    sup = float(np.max(np.abs(np.asarray(f(grid), dtype=float) - series(grid))))
    return ApproxPoly(series.coef.copy(), CHEBYSHEV, (lo, hi), target_fn, sup)


def to_monomial(p: ApproxPoly) -> ApproxPoly:
    """Rebase a Chebyshev fit onto raw-x monomials.

    Only safe for small degrees; the conversion is exponentially
    ill-conditioned, so degrees above 16 are rejected.
    """
    if p.basis == MONOMIAL:
        return p
    if p.degree > 16:
        raise ValueError("monomial conversion is unstable above degree 16")
    series = C.Chebyshev(p.coeffs, domain=list(p.interval))
    poly = series.convert(kind=np.polynomial.Polynomial)
    return ApproxPoly(poly.coef.copy(), MONOMIAL, p.interval, p.target_fn, p.sup_error)


def eval_clear(p: ApproxPoly, x):
    """Reference evaluation: Clenshaw for Chebyshev, Horner for monomial."""
    x = np.asarray(x, dtype=float)
    if p.basis == CHEBYSHEV:
        lo, hi = p.interval
        t = (2.0 * x - (hi + lo)) / (hi - lo)
        return C.chebval(t, p.coeffs)
    return np.polynomial.polynomial.polyval(x, p.coeffs)


# -- homomorphic evaluation -----------------------------------------------------

def depth_of(degree: int) -> int:
    """Levels a degree-d evaluation consumes."""
    return max(0, math.ceil(math.log2(degree + 1))) if degree > 0 else 0


def map_to_unit(ctx: SlotContext, ct: SimCiphertext,
                interval: tuple[float, float]) -> SimCiphertext:
    """Affine slot map onto [-1,1]; one level via a fused linear combination."""
    lo, hi = interval
    a = 2.0 / (hi - lo)
    b = -(hi + lo) / (hi - lo)
    return ctx.pc_linear([(ctx.encode(a), ct)], constant=ctx.encode(b))


class _PowerCache:
    """Memoized x^j (monomial) or T_j (Chebyshev) ciphertexts.

    Each entry is built from its halves so entry j sits exactly
    ceil(log2 j) levels below the base ciphertext.
    """

    def __init__(self, ctx: SlotContext, ct: SimCiphertext, basis: str):
        self.ctx = ctx
        self.basis = basis
        self.cache: dict[int, SimCiphertext] = {1: ct}

    def get(self, j: int) -> SimCiphertext:
        if j < 1:
            raise ValueError("powers start at 1")
        hit = self.cache.get(j)
        if hit is not None:
            return hit
        ctx = self.ctx
        a, b = (j + 1) // 2, j // 2
        pa, pb = ctx.align(self.get(a), self.get(b))
        prod = ctx.cc_mult(pa, pb)
        if self.basis == MONOMIAL:
            out = prod
        else:
            # T_{a+b} = 2 T_a T_b - T_{|a-b|}; |a-b| is 0 or 1 here
            doubled = ctx.ct_scale_int(prod, 2)
            if j % 2 == 0:
                out = ctx.ct_pt_add(doubled, ctx.encode(1.0, doubled.log_scale), sign=-1)
            else:
                t1 = ctx.level_down(self.cache[1], doubled.level)
                out = ctx.add(doubled, ctx.ct_scale_int(t1, -1))
        self.cache[j] = out
        return out


def _as_coeff_pts(ctx: SlotContext, coeffs: Sequence) -> list[SimPlaintext]:
    out = []
    for c in coeffs:
        if isinstance(c, SimPlaintext):
            if c.log_scale != ctx.params.log_scale:
                raise ValueError("coefficient plaintext not at context scale")
            out.append(c)
        else:
            out.append(ctx.encode(float(c)))
    return out


def _pt_scale(pt: SimPlaintext, s: float) -> SimPlaintext:
    return SimPlaintext(pt.slots * s, pt.log_scale)


def _pt_sub(a: SimPlaintext, b: SimPlaintext) -> SimPlaintext:
    return SimPlaintext(a.slots - b.slots, a.log_scale)


def _is_zero(pt: SimPlaintext) -> bool:
    return not np.any(pt.slots)


def _engine(ctx: SlotContext, coeff_pts: list[SimPlaintext], ct: SimCiphertext,
            basis: str, powers: _PowerCache | None = None,
            total_override: int | None = None) -> SimCiphertext:
    """Shared evaluator; returns a ciphertext exactly depth_of(deg) below ct
    (or total_override levels below, when a caller aligns several parts)."""
    n = len(coeff_pts) - 1
    total = depth_of(n) if total_override is None else total_override
    if total < depth_of(n):
        raise ValueError("depth override below the structural minimum")
    if ct.level < total:
        raise NeedsBootstrapError(
            f"degree {n} needs {total} levels, ciphertext has {ct.level}")
    base_level = ct.level
    if n == 0:
        return SimCiphertext(coeff_pts[0].slots.copy(), base_level - total,
                             ctx.params.log_scale, np.zeros(ctx.n_slots))
    if powers is None:
        powers = _PowerCache(ctx, ct, basis)
    bs = 1 << ((depth_of(n) + 1) // 2)

    def const_ct(pt: SimPlaintext, level: int) -> SimCiphertext:
        return SimCiphertext(pt.slots.copy(), level, ctx.params.log_scale,
                             np.zeros(ctx.n_slots))

    def run(coeffs: list[SimPlaintext], allowed: int) -> SimCiphertext:
        deg = len(coeffs) - 1
        target = base_level - allowed
        if deg == 0:
            return const_ct(coeffs[0], target)
        flat_depth = math.ceil(math.log2(deg)) + 1
        if deg <= bs and flat_depth <= allowed:
            terms = [(coeffs[j], powers.get(j)) for j in range(1, deg + 1)
                     if not _is_zero(coeffs[j])]
            if not terms:
                return const_ct(coeffs[0], target)
            constant = None if _is_zero(coeffs[0]) else coeffs[0]
            out = ctx.pc_linear(terms, constant=constant)
            return ctx.level_down(out, target)
        s = 1 << (math.ceil(math.log2(deg + 1)) - 1)
        if basis == MONOMIAL:
            hi_coeffs = coeffs[s:]
            lo_coeffs = coeffs[:s]
        else:
            # T_j = 2 T_{j-s} T_s - T_{2s-j} for s < j <= deg (< 2s), so the
            # high part doubles its tail and the mirror terms fold into the
            # remainder with a sign flip
            hi_coeffs = [coeffs[s]] + [_pt_scale(coeffs[s + i], 2.0)
                                       for i in range(1, deg - s + 1)]
            lo_coeffs = list(coeffs[:s])
            for j in range(s + 1, deg + 1):
                lo_coeffs[2 * s - j] = _pt_sub(lo_coeffs[2 * s - j], coeffs[j])
        xs = powers.get(s)
        if len(hi_coeffs) == 1:
            if _is_zero(hi_coeffs[0]):
                high = None
            else:
                high = ctx.level_down(ctx.pc_linear([(hi_coeffs[0], xs)]), target)
        else:
            q = run(hi_coeffs, allowed - 1)
            qa, xa = ctx.align(q, xs)
            high = ctx.level_down(ctx.cc_mult(qa, xa), target)
        low = ctx.level_down(run(lo_coeffs, allowed), target)
        return low if high is None else ctx.add(high, low)

    return run(list(coeff_pts), total)


def ps_eval_ct(ctx: SlotContext, p: ApproxPoly, ct: SimCiphertext,
               pre_mapped: bool = False) -> SimCiphertext:
    """Evaluate an approximant on every slot.

    Consumes exactly depth_of(degree) levels, plus one for the affine range
    map when the basis is Chebyshev on a non-unit interval (skipped if the
    caller already mapped the input, pre_mapped=True).
    """
    x = ct
    if p.basis == CHEBYSHEV and not pre_mapped and p.interval != (-1.0, 1.0):
        x = map_to_unit(ctx, ct, p.interval)
    return _engine(ctx, _as_coeff_pts(ctx, p.coeffs), x, p.basis)


def ps_eval_pt_coeffs(ctx: SlotContext, coeff_pts: Sequence[SimPlaintext],
                      ct: SimCiphertext, basis: str = MONOMIAL) -> SimCiphertext:
    """Same evaluator with per-slot coefficient vectors.

    Slot i of the result is sum_s coeff_pts[s][i] * basis_s(slot i of ct):
    one ciphertext evaluates a different polynomial in every slot.  Chebyshev
    coefficients are taken over the unit interval (map first if needed).
    """
    if not coeff_pts:
        raise ValueError("need at least one coefficient plaintext")
    return _engine(ctx, list(coeff_pts), ct, basis)


def ps_eval_monic_pt_coeffs(ctx: SlotContext, coeff_pts: Sequence[SimPlaintext],
                            ct: SimCiphertext) -> SimCiphertext:
    """Evaluate x^D + sum_{s<D} coeff_pts[s] * x^s with D = len(coeff_pts).

    D must be a power of two, so the leading term is a pure squaring chain
    and the whole evaluation fits in log2(D) levels, one less than a general
    degree-D polynomial.  Monomial basis only: the Chebyshev top term T_D is
    not monic, so the saving does not transfer.
    """
    D = len(coeff_pts)
    if D < 2 or D & (D - 1):
        raise ValueError("monic shortcut needs power-of-two degree >= 2")
    total = D.bit_length() - 1
    if ct.level < total:
        raise NeedsBootstrapError(
            f"monic degree {D} needs {total} levels, ciphertext has {ct.level}")
    powers = _PowerCache(ctx, ct, MONOMIAL)
    top = powers.get(D)
    low = _engine(ctx, list(coeff_pts), ct, MONOMIAL, powers=powers,
                  total_override=total)
    return ctx.add(ctx.level_down(top, ct.level - total), low)
