"""Homomorphic matrix-multiplication kernels.

Three kernels over row-major packed square matrices:

* ccmm_baseline: ciphertext x ciphertext product summing masked column
  rotations against row rotations; costs exactly 3 levels (one for the two
  input realignments done in parallel, one for column rotations, one for the
  Hadamard products).  Reference/cost baseline only.
* pcmm_depth1: plaintext x ciphertext product costing exactly 1 level.  The
  weight side absorbs every realignment as cleartext permutations, and the
  whole reduction is one fused multiply-accumulate.  Requires the ciphertext
  packed with shear power l+1 and produces shear power l, so products chain
  without ever spending levels on repacking.
* pcmm_bsgs: same contract with the k-sum split into b baby input rotations
  and g-1 giant output rotations, (b-1)+(g-1) ciphertext rotations total.

Weight plaintexts come from a PcmmPlan.  Eager plans precompute the d
permuted blocks; on-the-fly plans store a single base plaintext at
square-root scale and derive each block at use time with two plaintext
rotations and two mask multiplications (the masks are row-constant, so the
row rotation fuses into both masked branches).  Both derivations produce
bitwise-identical slot vectors, and both kernels reduce through balanced
pairwise trees, so for power-of-two splits the two kernels agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .packing import (PackedMatrix, col_mask, col_shear, pack_matrix, rot_col,
                      rot_row, shift_cols, shift_rows, unpack_matrix)
from .slotsim import (NeedsBootstrapError, SimCiphertext, SimPlaintext,
                      SlotContext, pairwise_sum)


@dataclass(frozen=True)
class BsgsSplit:
    baby: int
    giant: int

    def __post_init__(self):
        if self.baby < 1 or self.giant < 1:
            raise ValueError("split factors must be positive")


def default_split(d: int) -> BsgsSplit:
    """b = g = sqrt(d) when square, else the smallest divisor >= sqrt(d)."""
    r = math.isqrt(d)
    if r * r == d:
        return BsgsSplit(r, d // r)
    b = next(b for b in range(r + 1, d + 1) if d % b == 0)
    return BsgsSplit(b, d // b)


@dataclass
class PcmmPlan:
    """Weight-side preparation for the depth-1 product.

    base_clear holds col_shear(shift_rows(A), shear_power); every block the
    kernels consume is a row/column rotation of it.  On-the-fly plans keep
    only base_pt (encoded at half the scale exponent); eager plans also
    carry the full block table.
    """

    dim: int
    shear_power: int
    split: BsgsSplit
    on_the_fly: bool
    base_clear: np.ndarray
    base_pt: SimPlaintext | None = None
    table: dict[tuple[int, int], SimPlaintext] = field(default_factory=dict)


def make_pcmm_plan(ctx: SlotContext, weights: np.ndarray, shear_power: int = 0,
                   split: BsgsSplit | None = None,
                   on_the_fly: bool = False) -> PcmmPlan:
    weights = np.asarray(weights, dtype=float)
    d = weights.shape[0]
    if weights.shape != (d, d):
        raise ValueError("weights must be square")
    if shear_power < 0:
        raise ValueError("shear_power must be non-negative")
    if split is None:
        split = default_split(d)
    if split.baby * split.giant != d:
        raise ValueError(f"split {split.baby}x{split.giant} does not cover dim {d}")
    base = col_shear(shift_rows(weights), shear_power)
    plan = PcmmPlan(d, shear_power, split, on_the_fly, base)
    if on_the_fly:
        plan.base_pt = ctx.encode(base.reshape(-1), ctx.params.log_scale // 2)
    else:
        b = split.baby
        keys = {(i + j * b, j * b) for j in range(split.giant) for i in range(b)}
        keys |= {(k, 0) for k in range(d)}
        for k, jb in keys:
            plan.table[(k, jb)] = ctx.encode(_block_clear(plan, k, jb).reshape(-1))
    return plan


def _block_clear(plan: PcmmPlan, k: int, jb: int) -> np.ndarray:
    r = -plan.shear_power * k - jb
    return np.roll(np.roll(plan.base_clear, -k, axis=1), -r, axis=0)


def _derive_block(ctx: SlotContext, plan: PcmmPlan, k: int, jb: int) -> SimPlaintext:
    if not plan.on_the_fly:
        pt = plan.table.get((k, jb))
        if pt is None:
            pt = ctx.encode(_block_clear(plan, k, jb).reshape(-1))
            plan.table[(k, jb)] = pt
        return pt
    d, n = plan.dim, ctx.n_slots
    half = ctx.params.log_scale // 2
    r = -plan.shear_power * k - jb
    if k % d == 0:
        ones = ctx.encode(1.0, half)
        moved = ctx.pt_rotate(plan.base_pt, (r * d) % n)
        return ctx.pt_pt_mult_sqrt_scale(ones, moved)
    m = col_mask(d, k)
    mask = ctx.encode(np.tile(m.reshape(-1), n // (d * d)), half)
    comask = ctx.encode(np.tile((1.0 - m).reshape(-1), n // (d * d)), half)
    main = ctx.pt_rotate(plan.base_pt, (r * d + k) % n)
    wrap = ctx.pt_rotate(plan.base_pt, (r * d + k - d) % n)
    return ctx.pt_add(ctx.pt_pt_mult_sqrt_scale(mask, main),
                      ctx.pt_pt_mult_sqrt_scale(comask, wrap))


def derive_pt_block(ctx: SlotContext, plan: PcmmPlan, i: int, j: int) -> SimPlaintext:
    """Weight block for baby index i, giant index j of plan.split."""
    b, g = plan.split.baby, plan.split.giant
    if not (0 <= i < b and 0 <= j < g):
        raise ValueError(f"block index ({i},{j}) outside {b}x{g} split")
    return _derive_block(ctx, plan, i + j * b, j * b)


def _check_operand(plan: PcmmPlan, B: PackedMatrix) -> None:
    if not B.is_ct:
        raise TypeError("pcmm consumes a ciphertext operand")
    if B.dim != plan.dim:
        raise ValueError(f"dim mismatch: plan {plan.dim}, operand {B.dim}")
    if B.shear_power != plan.shear_power + 1:
        raise ValueError(
            f"shear chain broken: plan expects operand power {plan.shear_power + 1}, "
            f"got {B.shear_power}")
    if B.payload.level < 1:
        raise NeedsBootstrapError("pcmm needs one level")


def pcmm_depth1(ctx: SlotContext, plan: PcmmPlan, B: PackedMatrix) -> PackedMatrix:
    """Full k-sum in one fused multiply-accumulate: d-1 input rotations,
    exactly 1 level."""
    _check_operand(plan, B)
    d = plan.dim
    terms = []
    for k in range(d):
        rot = B.payload if k == 0 else ctx.rotate(B.payload, k * d)
        terms.append((_derive_block(ctx, plan, k, 0), rot))
    out = ctx.pc_linear(terms)
    return PackedMatrix(out, d, plan.shear_power)


def pcmm_bsgs(ctx: SlotContext, plan: PcmmPlan, B: PackedMatrix) -> PackedMatrix:
    """Split k-sum: baby input rotations are shared across giant groups,
    each group is one fused multiply-accumulate rotated into place."""
    _check_operand(plan, B)
    d, b, g = plan.dim, plan.split.baby, plan.split.giant
    baby = [B.payload if i == 0 else ctx.rotate(B.payload, i * d) for i in range(b)]
    partials = []
    for j in range(g):
        inner = ctx.pc_linear([(derive_pt_block(ctx, plan, i, j), baby[i])
                               for i in range(b)])
        partials.append(inner if j == 0 else ctx.rotate(inner, j * b * d))
    return PackedMatrix(pairwise_sum(ctx, partials), d, plan.shear_power)


def clear_pcmm(A: np.ndarray, B: np.ndarray, shear_power: int) -> np.ndarray:
    """Cleartext oracle for what the kernels decode to."""
    return col_shear(np.asarray(A, float) @ np.asarray(B, float), shear_power)


# -- ciphertext-ciphertext baseline ---------------------------------------------

def _apply_perm_masked(ctx: SlotContext, ct: SimCiphertext, d: int,
                       src_of: np.ndarray) -> SimCiphertext:
    """Apply slot permutation s <- src_of[s % d*d] via masked rotations.

    One fused linear combination: 1 level, one ciphertext rotation per
    distinct nonzero shift.
    """
    n = ctx.n_slots
    tile = d * d
    s = np.arange(tile)
    delta = (src_of - s) % n
    terms = []
    for off in np.unique(delta):
        mask = np.zeros(tile)
        mask[delta == off] = 1.0
        rot = ct if off == 0 else ctx.rotate(ct, int(off))
        terms.append((ctx.encode(np.tile(mask, n // tile)), rot))
    return ctx.pc_linear(terms)


def _shift_rows_src(d: int) -> np.ndarray:
    i, j = np.divmod(np.arange(d * d), d)
    return i * d + (i + j) % d


def _shift_cols_src(d: int) -> np.ndarray:
    i, j = np.divmod(np.arange(d * d), d)
    return ((i + j) % d) * d + j


def ccmm_baseline(ctx: SlotContext, A: PackedMatrix, B: PackedMatrix) -> PackedMatrix:
    """Ciphertext-ciphertext product; exactly 3 levels.

    Stage 1 realigns both inputs (row-shifted A, column-shifted B) with
    masked rotations, in parallel, 1 level.  Stage 2 column-rotates the A
    side (1 level; the k=0 term just drops a level).  Stage 3 multiplies
    against the freely row-rotated B side and reduces pairwise.
    """
    if not (A.is_ct and B.is_ct):
        raise TypeError("ccmm consumes two ciphertext operands")
    if A.dim != B.dim:
        raise ValueError("dim mismatch")
    if A.shear_power or B.shear_power:
        raise ValueError("ccmm operands must be unsheared")
    if A.payload.level != B.payload.level:
        raise ValueError("ccmm operands must sit at one level")
    if A.payload.level < 3:
        raise NeedsBootstrapError("ccmm needs three levels")
    d = A.dim
    sA = _apply_perm_masked(ctx, A.payload, d, _shift_rows_src(d))
    tB = _apply_perm_masked(ctx, B.payload, d, _shift_cols_src(d))
    prods = []
    for k in range(d):
        if k == 0:
            colA = ctx.level_down(sA, sA.level - 1)
        else:
            main = ctx.rotate(sA, k)
            wrap = ctx.rotate(sA, k - d)
            m = col_mask(d, k)
            colA = ctx.pc_linear([(pack_matrix(ctx, m), main),
                                  (pack_matrix(ctx, 1.0 - m), wrap)])
        rowB = ctx.level_down(tB if k == 0 else ctx.rotate(tB, k * d), colA.level)
        prods.append(ctx.cc_mult(colA, rowB))
    return PackedMatrix(pairwise_sum(ctx, prods), d, 0)


def clear_ccmm_identity(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """The permutation identity the baseline implements, in clear."""
    d = A.shape[0]
    sA, tB = shift_rows(A), shift_cols(B)
    out = np.zeros_like(A, dtype=float)
    for k in range(d):
        out = out + rot_col(sA, k) * rot_row(tB, k)
    return out
