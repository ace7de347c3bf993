"""Sum-of-squares decomposition trees for shallow polynomial evaluation.

A polynomial with even degree, positive leading coefficient, and real
coefficients can be written as u(x)^2 + v(x)^2 - m where m is the largest
value of -p over the reals: p + m is nonnegative, its complex roots pair up
into conjugates, and grouping each pair (x - a)^2 + b^2 and multiplying the
groups under the two-squares identity keeps everything a sum of two squares.
Applying the split recursively halves the degree at every level and yields a
binary tree whose 2^j leaves have degree 2^(k-j).

The payoff is slotwise: packing the leaf coefficients as plaintext vectors
lets one ciphertext evaluate every leaf at once, and j rounds of
square / rotate / add / subtract-constant walk back up the tree.  Total
multiplicative depth is k+1 instead of the 2^j-leaf sequential cost, with
only j rotations, and a fused variant that premultiplies the input by the
leaf leading coefficients (making every leaf monic) saves one more level.

Decompositions are computed with float64 root estimates polished to high
precision with mpmath, so reconstruction residuals sit at the float64
rounding floor even for degree-128 trees.  Numerically delicate inputs can
reorder the conjugate pairs (greedy flattening or explicit permutations) to
keep intermediate factors small; search_stable tries several orderings and
keeps the flattest tree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import mpmath
import numpy as np
from numpy.polynomial import chebyshev as C
from numpy.polynomial import polynomial as P

from .polyapprox import (
    CHEBYSHEV,
    MONOMIAL,
    ApproxPoly,
    ps_eval_monic_pt_coeffs,
    ps_eval_pt_coeffs,
)
from .slotsim import NeedsBootstrapError, SimCiphertext, SlotContext

# trailing coefficients below this fraction of the largest one are treated
# as zero when measuring effective degree
TRIM_REL = 1e-13
# the tree builder may pad or flip a top coefficient by up to this fraction
# to reach a positive leading coefficient at a splittable degree
ADJUST_REL = 1e-13
ROOT_RESIDUAL_REL = 1e-8
RECON_RESIDUAL_REL = 1e-9


def _as_coeffs(c) -> np.ndarray:
    a = np.atleast_1d(np.asarray(c, dtype=float))
    if a.ndim != 1 or a.size == 0:
        raise ValueError("coefficients must be a non-empty 1-d array")
    return a


def _eff_degree(c: np.ndarray, rel: float = TRIM_REL) -> int:
    big = np.max(np.abs(c))
    if big == 0.0:
        return 0
    keep = np.nonzero(np.abs(c) > rel * big)[0]
    return int(keep[-1]) if keep.size else 0


def _trimmed(c: np.ndarray, rel: float = TRIM_REL) -> np.ndarray:
    return c[: _eff_degree(c, rel) + 1].copy()


# -- high precision helpers ----------------------------------------------------

def _mp_dps(degree: int) -> int:
    # Chebyshev recurrences at |x| ~ 3 grow like (3+sqrt(8))^deg, so give the
    # working precision headroom proportional to the degree
    return max(60, 30 + degree)


def _val_der_mp(coeffs, basis: str, x):
    """Evaluate p(x) and p'(x) at an mp number, either basis."""
    n = len(coeffs) - 1
    if basis == MONOMIAL:
        p = coeffs[n]
        d = mpmath.mpf(0)
        for k in range(n - 1, -1, -1):
            d = d * x + p
            p = p * x + coeffs[k]
        return p, d
    # first kind T_k for the value, second kind U_{k-1} for the derivative
    p = coeffs[0]
    d = mpmath.mpf(0)
    if n >= 1:
        p = p + coeffs[1] * x
        d = d + coeffs[1]
    t_prev, t_cur = mpmath.mpf(1), x
    u_prev, u_cur = mpmath.mpf(1), 2 * x
    for k in range(2, n + 1):
        t_next = 2 * x * t_cur - t_prev
        p = p + coeffs[k] * t_next
        d = d + coeffs[k] * k * u_cur
        u_next = 2 * x * u_cur - u_prev
        t_prev, t_cur = t_cur, t_next
        u_prev, u_cur = u_cur, u_next
    return p, d


def _mul_mp(a: list, b: list, basis: str) -> list:
    if basis == MONOMIAL:
        out = [mpmath.mpf(0)] * (len(a) + len(b) - 1)
        for i, ai in enumerate(a):
            for j, bj in enumerate(b):
                out[i + j] += ai * bj
        return out
    # T_i T_j = (T_{i+j} + T_{|i-j|}) / 2
    out = [mpmath.mpf(0)] * (len(a) + len(b) - 1)
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            h = ai * bj / 2
            out[i + j] += h
            out[abs(i - j)] += h
    return out


def _axpy_mp(a: list, b: list, sb) -> list:
    out = [mpmath.mpf(0)] * max(len(a), len(b))
    for i, v in enumerate(a):
        out[i] += v
    for i, v in enumerate(b):
        out[i] += sb * v
    return out


def _scale_mp(a: list, s) -> list:
    return [v * s for v in a]


# -- roots and extrema ---------------------------------------------------------

def _float_roots(c: np.ndarray, basis: str) -> np.ndarray:
    return P.polyroots(c) if basis == MONOMIAL else C.chebroots(c)


def _polished_roots(c: np.ndarray, basis: str) -> list:
    """All roots as mp complex numbers, Newton-polished from float estimates."""
    n = len(c) - 1
    est = _float_roots(c, basis)
    if len(est) != n:
        raise RuntimeError(f"expected {n} roots, eigensolver produced {len(est)}")
    with mpmath.workdps(_mp_dps(n)):
        cm = [mpmath.mpf(float(v)) for v in c]
        stop = mpmath.mpf(10) ** (-mpmath.mp.dps + 10)
        big = max(abs(v) for v in cm)
        one = mpmath.mpf(1)

        def local_scale(x):
            # |p| floor near x: the dominant term grows like |x|^n outside
            # the unit disk, so measure convergence against that
            return big * max(one, abs(x)) ** n

        out = []
        for r0 in est:
            x = mpmath.mpc(complex(r0))
            if x.imag == 0:
                # real iterates can never reach a root just off the axis
                x += mpmath.mpc(0, 1e-8) * (1 + abs(x))
            for _ in range(100):
                f, d = _val_der_mp(cm, basis, x)
                if abs(f) <= stop * local_scale(x):
                    break
                if d == 0:
                    x = x + mpmath.mpf(10) ** (-mpmath.mp.dps // 2)
                    continue
                step = f / d
                x = x - step
                if abs(step) <= stop * (1 + abs(x)):
                    break
            f, _ = _val_der_mp(cm, basis, x)
            if abs(f) > mpmath.mpf("1e-25") * local_scale(x):
                raise RuntimeError(
                    f"root polish stalled at |p| = {float(abs(f)):.3e} "
                    f"near {complex(x):.6g}")
            out.append(x)
        return out


def find_roots(coeffs, basis: str = MONOMIAL) -> np.ndarray:
    """Polished roots as complex128, with a residual guarantee.

    Raises RuntimeError if any |p(root)| exceeds 1e-8 * max|coeff|.
    """
    c = _trimmed(_as_coeffs(coeffs))
    n = len(c) - 1
    if n == 0:
        return np.array([], dtype=complex)
    roots = np.array([complex(r) for r in _polished_roots(c, basis)])
    val = P.polyval(roots, c) if basis == MONOMIAL else C.chebval(roots, c)
    worst = float(np.max(np.abs(val))) if len(roots) else 0.0
    bound = ROOT_RESIDUAL_REL * float(np.max(np.abs(c)))
    if worst > bound:
        raise RuntimeError(
            f"root residual {worst:.3e} exceeds {bound:.3e} (degree {n})")
    return roots


def max_neg(coeffs, basis: str = MONOMIAL) -> float:
    """Largest value of -p over the reals (may be negative if p > 0 everywhere).

    Requires p bounded below: even effective degree with a positive leading
    coefficient, or a constant.
    """
    c = _trimmed(_as_coeffs(coeffs))
    n = len(c) - 1
    if n == 0:
        return -float(c[0])
    if n % 2 or c[-1] <= 0:
        raise ValueError("needs even degree and a positive leading coefficient")
    der = P.polyder(c) if basis == MONOMIAL else C.chebder(c)
    crit = _float_roots(der, basis)
    real = crit[np.abs(crit.imag) <= 1e-8 * (1.0 + np.abs(crit.real))].real
    if real.size == 0:
        raise RuntimeError("no real critical point found for an even-degree polynomial")
    # a couple of Newton steps on p' sharpen the minima locations
    der2 = P.polyder(der) if basis == MONOMIAL else C.chebder(der)
    for _ in range(3):
        g = P.polyval(real, der) if basis == MONOMIAL else C.chebval(real, der)
        h = P.polyval(real, der2) if basis == MONOMIAL else C.chebval(real, der2)
        safe = np.abs(h) > 0
        real = np.where(safe, real - np.where(safe, g, 0.0) / np.where(safe, h, 1.0), real)
    vals = P.polyval(real, c) if basis == MONOMIAL else C.chebval(real, c)
    return float(np.max(-vals))


# -- single split --------------------------------------------------------------

def _pair_conjugates(roots: list) -> list[tuple[float, float]]:
    """Group polished roots into (real part, |imag part|) base pairs.

    Complex roots pair with their conjugates; leftover real roots pair with
    the nearest other real root (their mean becomes the base, imag 0).
    """
    reals, upper, lower = [], [], []
    for r in roots:
        re, im = float(r.real), float(r.imag)
        if abs(im) <= 1e-7 * (1.0 + abs(re)):
            reals.append(re)
        elif im > 0:
            upper.append((re, im))
        else:
            lower.append((re, -im))
    pairs = []
    lower_left = list(lower)
    for re, im in upper:
        if lower_left:
            j = min(range(len(lower_left)),
                    key=lambda t: (lower_left[t][0] - re) ** 2 + (lower_left[t][1] - im) ** 2)
            re2, im2 = lower_left.pop(j)
            pairs.append(((re + re2) / 2.0, (im + im2) / 2.0))
        else:
            reals.append(re)
    for re, im in lower_left:
        reals.append(re)
    reals.sort()
    if len(reals) % 2:
        raise RuntimeError("odd number of unpaired real roots")
    for i in range(0, len(reals), 2):
        pairs.append(((reals[i] + reals[i + 1]) / 2.0, 0.0))
    pairs.sort()
    return pairs


def _leja_order(pairs: list[tuple[float, float]], interval: tuple[float, float]) -> tuple:
    """Greedy ordering that keeps the running product near 1 on a grid."""
    lo, hi = interval
    grid = np.linspace(lo, hi, 64)
    logs = []
    for re, im in pairs:
        q = (grid - re) ** 2 + im ** 2
        logs.append(np.log(np.maximum(q, 1e-300)))
    acc = np.zeros_like(grid)
    left = set(range(len(pairs)))
    order = []
    while left:
        t = min(left, key=lambda s: float(np.max(np.abs(acc + logs[s]))))
        acc = acc + logs[t]
        order.append(t)
        left.remove(t)
    return tuple(order)


def _split(c: np.ndarray, basis: str, nudge: float | None,
           ordering, interval: tuple[float, float]) -> tuple[np.ndarray, np.ndarray, float, tuple]:
    c = _trimmed(c)
    n = len(c) - 1
    scale = float(np.max(np.abs(c)))
    if n == 0:
        return np.zeros(1), np.zeros(1), -float(c[0]), ()
    if n % 2 or c[-1] <= 0:
        raise ValueError("needs even degree and a positive leading coefficient")

    m0 = max_neg(c, basis)

    def shifted(m: float) -> np.ndarray:
        q = c.copy()
        q[0] += m
        return q

    def compose(u: np.ndarray, v: np.ndarray, m: float) -> np.ndarray:
        mul = P.polymul if basis == MONOMIAL else C.chebmul
        r = mul(u, u)
        if np.any(v):
            vv = mul(v, v)
            r[: len(vv)] += vv
        r[0] -= m
        return r

    def residual(u, v, m) -> float:
        r = compose(u, v, m)
        k = max(len(r), len(c))
        diff = np.zeros(k)
        diff[: len(r)] += r
        diff[: len(c)] -= c
        return float(np.max(np.abs(diff)))

    def tol_for(u, v) -> float:
        # the identity is exact at high precision; what remains after
        # rounding u, v to float64 and composing in float is rounding noise
        # proportional to the squared coefficient size
        spread = (float(np.max(np.abs(u))) + float(np.max(np.abs(v)))) ** 2
        return max(RECON_RESIDUAL_REL * max(1.0, scale),
                   256 * n * np.finfo(float).eps * spread)

    # exact-square shortcut: if p + m0 has only real roots they carry even
    # multiplicity, so every other sorted root gives u directly and v = 0
    roots0 = _polished_roots(shifted(m0), basis)
    if all(abs(r.imag) <= 1e-7 * (1.0 + abs(r.real)) for r in roots0):
        with mpmath.workdps(_mp_dps(n)):
            rs = sorted(float(r.real) for r in roots0)
            u = [mpmath.sqrt(mpmath.mpf(_lead_monomial(c, basis)))]
            for r in rs[::2]:
                u = _mul_mp(u, [-mpmath.mpf(r), mpmath.mpf(1)], basis)
            uf = np.array([float(v) for v in u])
        vf = np.zeros(1)
        if residual(uf, vf, m0) <= tol_for(uf, vf):
            return uf, vf, m0, tuple(range(n // 2))

    m = m0 + (1e-6 * max(scale, 1e-6) if nudge is None else nudge)
    pairs = _pair_conjugates(_polished_roots(shifted(m), basis))
    if ordering is None:
        perm = tuple(range(len(pairs)))
    elif ordering == "leja":
        perm = _leja_order(pairs, interval)
    else:
        perm = tuple(int(i) for i in ordering)
        if sorted(perm) != list(range(len(pairs))):
            raise ValueError(f"ordering must permute 0..{len(pairs) - 1}")

    with mpmath.workdps(_mp_dps(n)):
        inv_rt2 = 1 / mpmath.sqrt(2)
        re, im = pairs[perm[0]]
        u = [-mpmath.mpf(re), mpmath.mpf(1)]
        v = [mpmath.mpf(im)]
        for t in perm[1:]:
            re, im = pairs[t]
            ut = [-mpmath.mpf(re), mpmath.mpf(1)]
            vt = [mpmath.mpf(im)]
            a = _axpy_mp(_mul_mp(u, ut, basis), _mul_mp(v, vt, basis), -1)
            b = _axpy_mp(_mul_mp(u, vt, basis), _mul_mp(ut, v, basis), 1)
            u = _scale_mp(_axpy_mp(a, b, 1), inv_rt2)
            v = _scale_mp(_axpy_mp(a, b, -1), inv_rt2)
        root_lead = mpmath.sqrt(mpmath.mpf(_lead_monomial(c, basis)))
        uf = np.array([float(x * root_lead) for x in u])
        vf = np.array([float(x * root_lead) for x in v])

    uf, vf = _normalize(uf), _normalize(vf)
    res = residual(uf, vf, m)
    bound = tol_for(uf, vf)
    if res > bound:
        raise RuntimeError(f"reconstruction residual {res:.3e} exceeds {bound:.3e}")
    return uf, vf, m, perm


def _lead_monomial(c: np.ndarray, basis: str) -> float:
    """Leading coefficient in the monomial sense (drives the root product)."""
    n = len(c) - 1
    lead = float(c[-1])
    if basis == CHEBYSHEV and n >= 1:
        lead *= 2.0 ** (n - 1)
    return lead


def _normalize(c: np.ndarray) -> np.ndarray:
    big = np.max(np.abs(c))
    if big == 0.0:
        return np.zeros(1)
    c = _trimmed(c, 1e-12)
    if c[-1] < 0:
        c = -c
    return c


def split_sos(coeffs, basis: str = MONOMIAL, nudge: float | None = None,
              ordering=None, interval: tuple[float, float] = (-1.0, 1.0)
              ) -> tuple[np.ndarray, np.ndarray, float]:
    """Write p as u^2 + v^2 - m with m = max(-p) (nudged when p + m has
    complex roots, so the pairing is unambiguous).

    ordering selects the combine order of the conjugate-pair factors:
    None keeps them sorted, "leja" greedily flattens the running product,
    or pass an explicit permutation.
    """
    u, v, m, _ = _split(_as_coeffs(coeffs), basis, nudge, ordering, interval)
    return u, v, m


# -- decomposition trees -------------------------------------------------------

@dataclass
class SosTree:
    """Recursive two-square decomposition of one polynomial.

    levels[l] holds the 2^l coefficient arrays of that level (levels[0][0]
    is the root), consts[l][i] the constant from splitting node (l, i) into
    children (l+1, i) and (l+1, i + 2^l).  k is the log2 of the nominal
    (power-of-two padded) root degree, so leaves have nominal degree
    2^(k - depth).
    """
    k: int
    depth: int
    basis: str
    interval: tuple[float, float]
    levels: list[list[np.ndarray]]
    consts: list[list[float]]
    orderings: dict = field(default_factory=dict)
    target_fn: str = ""
    adjust_sup: float = 0.0
    score: float | None = None

    @property
    def leaf_degree(self) -> int:
        return 1 << (self.k - self.depth)

    def root_poly(self) -> ApproxPoly:
        # chebyshev trees keep coefficients in the unit variable, so the
        # returned poly evaluates there; the tree's interval field only
        # records the original fit range
        span = (-1.0, 1.0) if self.basis == CHEBYSHEV else self.interval
        return ApproxPoly(self.levels[0][0].copy(), self.basis, span,
                          self.target_fn)

    def node(self, level: int, index: int) -> np.ndarray:
        return self.levels[level][index]

    def to_dict(self) -> dict:
        return {
            "k": self.k, "depth": self.depth, "basis": self.basis,
            "interval": list(self.interval), "target_fn": self.target_fn,
            "adjust_sup": self.adjust_sup, "score": self.score,
            "levels": [[a.tolist() for a in lev] for lev in self.levels],
            "consts": [list(row) for row in self.consts],
            "orderings": {f"{l}/{i}": list(p)
                          for (l, i), p in self.orderings.items()},
        }

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SosTree":
        orderings = {}
        for key, p in d.get("orderings", {}).items():
            l, i = key.split("/")
            orderings[(int(l), int(i))] = tuple(p)
        return cls(d["k"], d["depth"], d["basis"], tuple(d["interval"]),
                   [[np.asarray(a, dtype=float) for a in lev] for lev in d["levels"]],
                   [list(map(float, row)) for row in d["consts"]],
                   orderings, d.get("target_fn", ""),
                   d.get("adjust_sup", 0.0), d.get("score"))

    @classmethod
    def from_json(cls, path) -> "SosTree":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _prep_root(c: np.ndarray, depth: int) -> tuple[np.ndarray, float]:
    """Trim the tail so the effective degree is a positive-leading multiple
    of 2^depth, recording the dropped mass as extra sup error.

    Truncation (not padding) is the default: appending a 1e-13-relative top
    coefficient plants a root at radius ~1e12 and the two-square certificate
    cannot survive it.  Dropping trailing terms stays inside the fit family,
    and ladder callers tolerate it because a group-constant relative error
    cancels at the next normalization.  Padding remains only for fits whose
    whole degree is below 2^depth.
    """
    c = _as_coeffs(c)
    big = float(np.max(np.abs(c)))
    if big == 0.0:
        return np.zeros(1), 0.0
    d0 = _eff_degree(c)
    adjust = float(np.sum(np.abs(c[d0 + 1:])))
    c = c[: d0 + 1].copy()
    if depth == 0 or d0 == 0:
        return c, adjust
    step = 1 << depth
    d = d0 - d0 % step
    while d > 0 and c[d] <= TRIM_REL * big:
        d -= step
    if d > 0:
        adjust += float(np.sum(np.abs(c[d + 1:])))
        return c[: d + 1], adjust
    c = np.concatenate([c, np.zeros(step - d0 % step if d0 % step else 0)])
    # keep the pad clear of the trim threshold or it vanishes on re-read
    pad = 8 * ADJUST_REL * big
    if c[-1] <= 0:
        if c[-1] < -TRIM_REL * big:
            raise ValueError("needs a positive leading coefficient")
        adjust += abs(float(c[-1]) - pad)
        c[-1] = pad
    return c, adjust


def build_tree(p: ApproxPoly, depth: int, orderings: dict | None = None,
               default_ordering=None, nudge: float | None = None) -> SosTree:
    """Decompose an approximant into a depth-j two-square tree.

    orderings maps (level, index) of a split node to a pair permutation (or
    "leja"); default_ordering applies everywhere else.  The resolved
    permutations are recorded on the tree so a build is reproducible from
    its JSON form.  Chebyshev-basis trees keep coefficients in the unit
    variable; the stored interval only documents the original fit range.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    orderings = dict(orderings or {})
    root, adjust = _prep_root(p.coeffs, depth)
    d_eff = len(root) - 1
    k = max(depth, (d_eff - 1).bit_length() if d_eff >= 2 else 0)
    span = (-1.0, 1.0) if p.basis == CHEBYSHEV else p.interval
    levels = [[root]]
    consts: list[list[float]] = []
    resolved: dict = {}
    for lev in range(depth):
        cur = levels[lev]
        nxt: list[np.ndarray] = [None] * (2 * len(cur))
        row: list[float] = []
        for i, node in enumerate(cur):
            want = orderings.get((lev, i), default_ordering)
            u, v, m, perm = _split(node, p.basis, nudge, want, span)
            if lev + 1 < depth and _eff_degree(v) % 2 and _eff_degree(v) > 0:
                # v needs splitting next level, so its effective degree must
                # be even; rotating the combine order usually restores the
                # cancelled top coefficient
                fixed = False
                npairs = max(1, _eff_degree(node) // 2)
                for shift in range(1, min(8, npairs)):
                    alt = tuple((t + shift) % npairs for t in range(npairs))
                    u2, v2, m2, perm2 = _split(node, p.basis, nudge, alt, span)
                    if _eff_degree(v2) % 2 == 0:
                        u, v, m, perm = u2, v2, m2, perm2
                        fixed = True
                        break
                if not fixed:
                    pad = 8 * ADJUST_REL * float(np.max(np.abs(v)))
                    v = np.concatenate([v, [pad]])
            nxt[i] = u
            nxt[i + len(cur)] = v
            row.append(m)
            resolved[(lev, i)] = perm
        levels.append(nxt)
        consts.append(row)
    tree = SosTree(k, depth, p.basis, p.interval, levels, consts, resolved,
                   p.target_fn, adjust)
    tree.score = score_tree(tree)
    return tree


def score_tree(tree: SosTree, grid_pts: int = 512) -> float:
    """Stability score: worst sibling-pair sup of |u_i| + |u_sib| over the
    evaluation range, maxed over the inner levels.  Squaring a level adds
    about 1 + log2(score) bits of error, so flat is good."""
    if tree.depth == 0:
        return 1.0
    lo, hi = (-1.0, 1.0) if tree.basis == CHEBYSHEV else tree.interval
    grid = np.linspace(lo, hi, grid_pts)
    ev = P.polyval if tree.basis == MONOMIAL else C.chebval
    worst = 0.0
    for lev in range(1, tree.depth + 1):
        half = 1 << (lev - 1)
        for i in range(half):
            s = np.abs(ev(grid, tree.levels[lev][i]))
            s = s + np.abs(ev(grid, tree.levels[lev][i + half]))
            worst = max(worst, float(np.max(s)))
    return worst


def level_scores(tree: SosTree, grid_pts: int = 512) -> list[float]:
    """Per-level stability scores (index 0 is the first split level)."""
    if tree.depth == 0:
        return []
    lo, hi = (-1.0, 1.0) if tree.basis == CHEBYSHEV else tree.interval
    grid = np.linspace(lo, hi, grid_pts)
    ev = P.polyval if tree.basis == MONOMIAL else C.chebval
    out = []
    for lev in range(1, tree.depth + 1):
        half = 1 << (lev - 1)
        worst = 0.0
        for i in range(half):
            s = np.abs(ev(grid, tree.levels[lev][i]))
            s = s + np.abs(ev(grid, tree.levels[lev][i + half]))
            worst = max(worst, float(np.max(s)))
        out.append(worst)
    return out


def search_stable(p: ApproxPoly, depth: int, trials: int = 8,
                  seed: int = 0, nudge: float | None = None) -> SosTree:
    """Build several trees under different pair orderings, keep the flattest.

    Trial 0 is the sorted order, trial 1 the greedy flattener, the rest
    random permutations; builds that fail their residual check are skipped.
    """
    best: SosTree | None = None
    candidates: list[dict | None] = [None, "leja"]
    sizes: dict[tuple[int, int], int] = {}
    rng = np.random.default_rng(seed)
    built_first = None
    for trial in range(max(1, trials)):
        if trial < 2:
            default = candidates[trial]
            explicit = None
        else:
            if not sizes:
                break
            explicit = {key: tuple(int(x) for x in rng.permutation(npair))
                        for key, npair in sizes.items()}
            default = None
        try:
            tree = build_tree(p, depth, orderings=explicit,
                              default_ordering=default, nudge=nudge)
        except (RuntimeError, ValueError):
            continue
        if built_first is None:
            built_first = tree
            sizes = {key: len(perm) for key, perm in tree.orderings.items()
                     if len(perm) > 1}
        if best is None or tree.score < best.score:
            best = tree
    if best is None:
        raise RuntimeError("no ordering produced a valid decomposition")
    return best


# -- shallow slotwise evaluation -----------------------------------------------

def _leaf_matrix(tree: SosTree, fused: bool) -> np.ndarray:
    """Leaf coefficients as a (2^depth, D+1) array, padded with zeros."""
    D = tree.leaf_degree
    leaves = tree.levels[tree.depth]
    out = np.zeros((len(leaves), D + 1))
    for i, leaf in enumerate(leaves):
        if len(leaf) > D + 1:
            raise ValueError("leaf degree exceeds the nominal leaf degree")
        out[i, : len(leaf)] = leaf
    if fused:
        if tree.basis != MONOMIAL:
            raise ValueError("fused evaluation needs a monomial-basis tree")
        for i in range(len(leaves)):
            lead = out[i, D]
            if lead == 0.0:
                if np.any(out[i]):
                    raise ValueError(
                        f"leaf {i} is not full degree; fused evaluation needs "
                        "monic-scalable leaves")
            elif lead < 0.0:
                raise ValueError("leaf leading coefficients must be positive")
    return out


def fused_input_scale(tree: SosTree, used_slots: int, n_slots: int) -> np.ndarray:
    """Per-slot premultiplier making every leaf monic: leaf b gets its
    leading coefficient^(1/D) replicated over block b.  Fold this vector
    into whatever plaintext product feeds the evaluation."""
    leaf = _leaf_matrix(tree, fused=True)
    D = tree.leaf_degree
    c = np.power(np.maximum(leaf[:, D], 0.0), 1.0 / D)
    block = np.arange(n_slots) // used_slots
    return c[block % len(c)]


def slim_eval(ctx: SlotContext, tree: SosTree, ct: SimCiphertext,
              used_slots: int, fused: bool = False) -> SimCiphertext:
    """Evaluate the tree's root polynomial on the first used_slots slots.

    The input must be tiled with period used_slots (encode does this), and
    Chebyshev-basis trees expect it already mapped to the unit interval.
    One evaluation of all 2^depth leaves (vector coefficients, one
    ciphertext) is followed by depth rounds of square / rotate / add /
    subtract-constant, so the total depth is k+1 and the rotation count is
    exactly depth.  The fused variant expects the input premultiplied by
    fused_input_scale and finishes one level earlier (depth k).

    Only slots whose block index is a multiple of 2^depth hold the result;
    in particular the first used_slots slots do.
    """
    n = ctx.n_slots
    if used_slots < 1 or used_slots & (used_slots - 1):
        raise ValueError("used_slots must be a power of two")
    if used_slots << tree.depth > n:
        raise ValueError("used_slots * 2^depth must fit in the slot count")
    need = tree.k + (0 if fused else 1)
    if ct.level < need:
        raise NeedsBootstrapError(
            f"tree needs {need} levels, ciphertext has {ct.level}")

    leaf = _leaf_matrix(tree, fused)
    D = tree.leaf_degree
    block = (np.arange(n) // used_slots) % len(leaf)
    if fused:
        scale = np.power(np.maximum(leaf[:, D], 0.0), 1.0 / D)
        w = np.zeros_like(leaf[:, :D])
        nz = scale > 0
        for s in range(D):
            w[nz, s] = leaf[nz, s] / scale[nz] ** s
        pts = [ctx.encode(w[block, s]) for s in range(D)]
        y = ps_eval_monic_pt_coeffs(ctx, pts, ct)
    else:
        pts = [ctx.encode(leaf[block, s]) for s in range(D + 1)]
        y = ps_eval_pt_coeffs(ctx, pts, ct, basis=tree.basis)

    for lev in range(tree.depth, 0, -1):
        sq = ctx.cc_mult(y, y)
        rot = ctx.rotate(sq, used_slots << (lev - 1))
        y = ctx.add(sq, rot)
        row = np.asarray(tree.consts[lev - 1], dtype=float)
        half = 1 << (lev - 1)
        mvec = row[(np.arange(n) // used_slots) % half]
        y = ctx.ct_pt_add(y, ctx.encode(mvec), sign=-1)
    return y


def decode_slim(ctx: SlotContext, ct: SimCiphertext, used_slots: int) -> np.ndarray:
    """First used_slots slots of a slim evaluation result."""
    return ctx.decrypt_values(ct)[:used_slots]
