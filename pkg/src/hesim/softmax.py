"""Softmax as a squaring ladder with a self-normalizing auxiliary track.

exp and max do not commute with encryption, so this softmax never takes a
max.  The caller translates scores by a public constant into [-max_abs, 0]
(softmax is shift invariant, so the constant cancels), then

    y_0      = exp_fit(x)                      (exp of scores / 2^k)
    y_{l+1}  = (y_l * r_l)^2   with r_l = 1 / sqrt(sum_group y_l^2)

Each step squares the effective exponent and renormalizes: after k steps the
result is exactly softmax in exact arithmetic, because (y^2 / sum y^2)
telescopes.  Mid-ladder inverse-sqrt error is constant within a group and is
divided out by the next normalization; only the final iteration's accuracy
reaches the output.

The main track therefore consumes exactly 2k + depth(exp_fit) levels and
never bootstraps.  All the expensive work (group norm, affine window map,
inverse-sqrt via a slim sum-of-squares tree, rebroadcast) happens on the
auxiliary track, which bootstraps freely through scaled bootstraps with
calibrated per-slot bounds.

Groups are strided: group g occupies slots {g + m * stride}, so the norm is
log2(d) rotation-and-adds with no masks.  A shear-packed score matrix is the
special case stride == dim: each matrix column is one group, giving a full
column-wise softmax on a single ciphertext.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .packing import PackedMatrix
from .polyapprox import (
    ApproxPoly,
    RangeTable,
    chebyshev_fit,
    depth_of,
    eval_clear,
    ps_eval_ct,
    to_monomial,
)
from .slotsim import (
    BoundsProfile,
    NeedsBootstrapError,
    SimCiphertext,
    SlotContext,
)
from .sospoly import SosTree, build_tree, slim_eval


def softmax_clear(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Reference softmax (max-shifted, numerically safe)."""
    s = np.asarray(scores, dtype=float)
    z = np.exp(s - np.max(s, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


@dataclass
class IterPlan:
    """One normalization step: derived norm window and its inverse-sqrt tree."""
    interval: tuple[float, float]  # fit window for the group norms
    tree: SosTree                  # decomposition of 1/sqrt(t) on the window
    r_bound: float                 # bootstrap bound for the inverse-sqrt values
    n_range: tuple[float, float]   # calibrated group-norm range, for reports

    def to_dict(self) -> dict:
        return {"interval": list(self.interval), "r_bound": self.r_bound,
                "n_range": list(self.n_range), "tree": self.tree.to_dict()}


@dataclass
class SoftmaxPlan:
    """Calibrated artifacts for softmax over groups of d scores."""
    d: int
    halving_steps: int
    max_abs: float
    unit_shift: int            # free input scaling: u = x / 2^unit_shift
    exp_fit: ApproxPoly        # exp(2^unit_shift * u / 2^k) on u in (-max_abs/2^unit_shift, 0)
    iters: list[IterPlan] = field(default_factory=list)

    @property
    def main_levels(self) -> int:
        """Levels the main track consumes: exp depth + 2 per iteration."""
        return depth_of(self.exp_fit.degree) + 2 * self.halving_steps

    def to_dict(self) -> dict:
        return {"d": self.d, "halving_steps": self.halving_steps,
                "max_abs": self.max_abs, "unit_shift": self.unit_shift,
                "exp_degree": self.exp_fit.degree,
                "main_levels": self.main_levels,
                "iters": [it.to_dict() for it in self.iters]}


@dataclass
class TrackReport:
    """Two-track accounting for one softmax run.

    The invariant worth the name: every bootstrap happens on the auxiliary
    track, so aux_bootstraps always equals the ledger's bootstrap total for
    the run and main_levels_used is pure level consumption.
    """
    main_levels_used: int
    aux_bootstraps: int
    entry_level: int
    exit_level: int
    total_bootstraps: int
    windows: list[list[float]]
    ledger: dict

    def to_dict(self) -> dict:
        return {"main_levels_used": self.main_levels_used,
                "aux_bootstraps": self.aux_bootstraps,
                "entry_level": self.entry_level,
                "exit_level": self.exit_level,
                "total_bootstraps": self.total_bootstraps,
                "windows": self.windows,
                "ledger": self.ledger}


def default_samples(d: int, max_abs: float, count: int = 48,
                    seed: int = 20240917) -> np.ndarray:
    """Representative translated score groups covering the usual shapes.

    Assumes the pipeline convention that each group's maximum lands near 0:
    uniform draws translated to that convention, flat groups, and peaked
    groups (one dominant score, the rest saturated).
    """
    rng = np.random.default_rng(seed)
    rows = [np.zeros(d)]
    for frac in (0.25, 0.5, 1.0):
        u = -rng.uniform(0, max_abs * frac, size=(count // 3, d))
        rows.append(u - np.max(u, axis=-1, keepdims=True))
    peak = np.full((4, d), -max_abs)
    peak[:, 0] = 0.0
    rows.append(peak)
    half = np.full((4, d), -max_abs)
    half[:, : max(1, d // 2)] = 0.0
    rows.append(half)
    return np.vstack(rows)


def _fit_rel_error(g: ApproxPoly, tree: SosTree, grid: int = 801) -> float:
    """Worst relative error of the tree's root polynomial against 1/sqrt."""
    lo, hi = g.interval
    t = np.linspace(lo, hi, grid)
    u = (2.0 * t - (hi + lo)) / (hi - lo)
    vals = eval_clear(tree.root_poly(), u)
    want = 1.0 / np.sqrt(t)
    return float(np.max(np.abs(vals - want) / want))


def calibrate_softmax(d: int, samples: np.ndarray | None = None,
                      halving_steps: int | None = None,
                      ranges: RangeTable | None = None,
                      margin: float = 1.3,
                      tree_depth: int = 2,
                      mid_degree: int = 31,
                      final_degree: int = 128,
                      exp_degree: int = 15,
                      invsqrt_interval: tuple[float, float] | None = None
                      ) -> SoftmaxPlan:
    """Fit the ladder to a score distribution.

    samples is an (S, d) array of representative score groups already
    translated into [-max_abs, 0], the same convention the encrypted op
    expects (default: a synthesized spread of translated shapes).  Each
    iteration's inverse-sqrt window is derived from the clear-simulated
    distribution of group norms at that iteration, margin-widened, unless
    invsqrt_interval pins it explicitly.  The clear simulation applies the
    actual fitted trees, so later windows see fit-induced spread too.

    Mid-ladder iterations get a cheaper lower-degree inverse-sqrt: their
    error is constant within a group and the next normalization divides
    it right back out, so only the final iteration needs the full degree.
    """
    ranges = ranges or RangeTable()
    steps = ranges.halving_steps if halving_steps is None else halving_steps
    max_abs = ranges.softmax_max_abs
    if samples is None:
        samples = default_samples(d, max_abs)
    samples = np.asarray(samples, dtype=float).reshape(-1, d)
    if np.max(samples) > 1e-9 or np.min(samples) < -max_abs - 1e-9:
        raise ValueError(f"calibration scores must lie in [{-max_abs}, 0]")

    # scores arrive in [-max_abs, 0]; powers of a ciphertext that large
    # would carry noise proportional to |x|^degree, so the encrypted path
    # first shrinks to u = x / 2^shift (free scale reinterpretation) and the
    # exp approximant is fitted directly in u; the monomial form that makes
    # this free caps the degree at 16
    if exp_degree > 16:
        raise ValueError("exp_degree above 16 would need an unstable basis "
                         "change; raise halving_steps instead")
    shift = max(0, int(np.ceil(np.log2(max_abs))))
    lo_u = -max_abs / (1 << shift)
    fit = chebyshev_fit(lambda u: np.exp((1 << shift) * u / (1 << steps)),
                        (lo_u, 0.0), exp_degree, "exp")
    exp_fit = to_monomial(fit)

    y = np.exp(samples / (1 << steps))
    iters = []
    for step in range(steps):
        n = np.sum(y * y, axis=-1)
        n_lo, n_hi = float(np.min(n)), float(np.max(n))
        if invsqrt_interval is not None:
            lo_w, hi_w = invsqrt_interval
        else:
            lo_w, hi_w = n_lo / margin, n_hi * margin
            if hi_w / lo_w < 2.0:          # degenerate spread: keep a sane window
                g_mid = float(np.sqrt(lo_w * hi_w))
                lo_w, hi_w = g_mid / np.sqrt(2.0), g_mid * np.sqrt(2.0)
        final = step == steps - 1
        degree = final_degree if final else mid_degree
        g = chebyshev_fit(lambda t: 1.0 / np.sqrt(t), (lo_w, hi_w),
                          degree, "inv_sqrt")
        tree = build_tree(g, tree_depth)
        rel = _fit_rel_error(g, tree)
        if rel > (2.0 ** -16 if final else 0.25):
            raise ValueError(
                f"iteration {step}: inverse-sqrt fit error {rel:.2e} over "
                f"window ratio {hi_w / lo_w:.1f}; tighten the calibration "
                f"samples or raise the fit degree")
        r_bound = 1.05 / np.sqrt(lo_w)
        iters.append(IterPlan((lo_w, hi_w), tree, r_bound, (n_lo, n_hi)))
        # propagate through the fitted tree, not the exact inverse sqrt, so
        # the next window absorbs this iteration's fit error
        u_n = (2.0 * n - (hi_w + lo_w)) / (hi_w - lo_w)
        r = eval_clear(tree.root_poly(), u_n)
        y = (y * r[:, None]) ** 2
    return SoftmaxPlan(d, steps, max_abs, shift, exp_fit, iters)


def strided_norm_sq(ctx: SlotContext, ct: SimCiphertext, d: int,
                    stride: int) -> SimCiphertext:
    """Sum of squares over the strided group {m * stride : m < d}.

    One cc_mult then log2(d) rotate-and-adds (no masks): slot 0 ends up
    holding sum_m ct[m * stride]^2.  When the payload is tiled with period
    d * stride the wraparound makes every slot hold its own group's sum,
    which is how the ladder normalizes all groups at once.
    """
    if d < 1 or (d & (d - 1)):
        raise ValueError("group size must be a power of two")
    if stride < 1 or d * stride > ctx.n_slots:
        raise ValueError("d * stride must fit in the slot count")
    acc = ctx.cc_mult(ct, ct)
    shift = stride
    for _ in range(d.bit_length() - 1):
        acc = ctx.add(acc, ctx.rotate(acc, shift))
        shift *= 2
    return acc


def _mask_replicate(ctx: SlotContext, ct: SimCiphertext, used_slots: int,
                    depth: int) -> SimCiphertext:
    """Keep the valid slim blocks (block index 0 mod 2^depth), zero the rest,
    then shift-and-add copies until every block holds its group's value."""
    n = ctx.n_slots
    blocks = (np.arange(n) // used_slots) % (1 << depth)
    mask = ctx.encode((blocks == 0).astype(float))
    out = ctx.pc_mult(mask, ct)
    for t in range(depth):
        out = ctx.add(out, ctx.rotate(out, -(used_slots << t)))
    return out


def _aux_inv_sqrt(ctx: SlotContext, norm: SimCiphertext, it: IterPlan,
                  counters: dict) -> SimCiphertext:
    """Auxiliary track: window map, slim inverse-sqrt, rebroadcast, lift.

    Bootstraps as needed; the result arrives at boot_level - 1 (or higher),
    ready to align down to wherever the main track sits.
    """
    lo_w, hi_w = it.interval
    mid, halfw = (hi_w + lo_w) / 2.0, (hi_w - lo_w) / 2.0
    a = 1.0 / halfw
    b = -mid / halfw
    if norm.level < 1:
        norm = ctx.scaled_bootstrap(norm, BoundsProfile.uniform(
            hi_w, ctx.n_slots))
        counters["aux_bootstraps"] += 1
    t_unit = ctx.pc_linear([(ctx.encode(np.full(ctx.n_slots, a)), norm)],
                           constant=ctx.encode(np.full(ctx.n_slots, b)))

    need = it.tree.k + 1
    if t_unit.level < need + 1:    # +1 for the rebroadcast mask
        t_unit = ctx.scaled_bootstrap(t_unit, BoundsProfile.uniform(1.0, ctx.n_slots))
        counters["aux_bootstraps"] += 1
    us = counters["used_slots"]
    r = slim_eval(ctx, it.tree, t_unit, us)
    r = _mask_replicate(ctx, r, us, it.tree.depth)
    if r.level < ctx.params.boot_level - 1:
        r = ctx.scaled_bootstrap(r, BoundsProfile.uniform(it.r_bound, ctx.n_slots))
        counters["aux_bootstraps"] += 1
    return r


def softmax_encrypted(ctx: SlotContext, ct: SimCiphertext, plan: SoftmaxPlan,
                      stride: int | None = None
                      ) -> tuple[SimCiphertext, TrackReport]:
    """Softmax over strided groups of plan.d translated scores.

    ct holds scores already shifted into [-max_abs, 0] by a public constant,
    tiled so group g sits at slots {g + m * stride}; default stride is
    n_slots / d (one group per tile).  Returns the softmax ciphertext and a
    TrackReport.  The main track consumes exactly plan.main_levels levels
    from min(input level, top - 1) and never bootstraps.
    """
    n = ctx.n_slots
    d = plan.d
    if stride is None:
        stride = max(1, n // d)
    if (d & (d - 1)) or (stride & (stride - 1)) or n % (stride * d):
        raise ValueError("need power-of-two d and stride with stride*d dividing n")

    # the aux track returns at boot_level - 1 at best, so any entry that
    # leaves the post-exp main track above that would burn main levels
    # waiting for the first r; clamp so y lands at or below the delivery
    entry = min(ct.level, ctx.params.top_level - 1,
                ctx.params.boot_level - 1 + depth_of(plan.exp_fit.degree))
    ct = ctx.level_down(ct, entry)
    if entry < plan.main_levels + 1:
        raise NeedsBootstrapError(
            f"softmax main track needs {plan.main_levels} levels, has {entry}")

    # the group-norm vector has period stride, which is exactly the tiling
    # the slim evaluator wants
    counters = {"aux_bootstraps": 0, "used_slots": stride}
    before = ctx.ledger.snapshot()
    boots_before = ctx.ledger.bootstraps

    y = ps_eval_ct(ctx, plan.exp_fit, ctx.div_pow2(ct, plan.unit_shift))
    for it in plan.iters:
        norm = strided_norm_sq(ctx, y, d, stride)
        r = _aux_inv_sqrt(ctx, norm, it, counters)
        ya, ra = ctx.align(y, r)
        y = ctx.cc_mult(ya, ra)
        y = ctx.cc_mult(y, y)

    report = TrackReport(
        main_levels_used=entry - y.level,
        aux_bootstraps=counters["aux_bootstraps"],
        entry_level=entry,
        exit_level=y.level,
        total_bootstraps=ctx.ledger.bootstraps - boots_before,
        windows=[list(it.n_range) for it in plan.iters],
        ledger=ctx.ledger.diff(before),
    )
    return y, report


def softmax_on_tau_packed(ctx: SlotContext, pm: PackedMatrix,
                          plan: SoftmaxPlan) -> tuple[PackedMatrix, TrackReport]:
    """Column-wise softmax of a shear-1-packed score matrix.

    With payload[i*d + j] = S[(i+j) % d, j], column j is exactly the strided
    group {i*d + j}, so one ladder normalizes every column simultaneously
    and the shear-1 layout is preserved for the next matmul.
    """
    if not pm.is_ct:
        raise ValueError("expected an encrypted score matrix")
    if pm.shear_power % pm.dim != 1:
        raise ValueError("expected a shear-1 packed matrix")
    if plan.d != pm.dim:
        raise ValueError(f"plan is for groups of {plan.d}, matrix dim is {pm.dim}")
    out, report = softmax_encrypted(ctx, pm.payload, plan, stride=pm.dim)
    return PackedMatrix(out, pm.dim, pm.shear_power), report
