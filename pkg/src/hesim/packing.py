"""Row-major matrix packing and its permutation algebra.

A d x d matrix occupies d*d consecutive slots, row-major, tiled periodically
across the ciphertext (so d*d must divide the slot count); a zero-fill
variant exists for mask-sensitive tests.  Under this layout a cyclic slot
rotation by k*d rotates matrix rows by k, while column rotations need two
slot rotations glued with complementary masks.

Cleartext permutations the matmul kernels are built on:

* shift_rows(M)[i, j]  = M[i, (i+j) % d]    row i left-rotated by i
* shift_cols(M)[i, j]  = M[(i+j) % d, j]    column j up-rotated by j
* col_shear(M, l)      = shift_cols iterated l times,
  index form M[(i + l*j) % d, j]; order divides d (col_shear(M, d) == M)

shift_rows and shift_cols both align the main diagonal: into column 0 and
into row 0 respectively.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .slotsim import SimCiphertext, SimPlaintext, SlotContext


@dataclass
class PackedMatrix:
    """A square matrix living in ciphertext (or plaintext) slots.

    shear_power records how many col_shear applications the stored matrix
    carries relative to the logical one; matmul kernels consume and produce
    specific shear powers, so the field is checked at kernel boundaries.
    """

    payload: SimCiphertext | SimPlaintext
    dim: int
    shear_power: int = 0

    @property
    def is_ct(self) -> bool:
        return isinstance(self.payload, SimCiphertext)

    @property
    def level(self) -> int:
        if not self.is_ct:
            raise TypeError("plaintext packing has no level")
        return self.payload.level


def _flatten(ctx: SlotContext, mat: np.ndarray, zero_fill: bool) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    d0, d1 = mat.shape
    if d0 != d1:
        raise ValueError("only square matrices are packed")
    if d0 * d0 > ctx.n_slots:
        raise ValueError(f"{d0}x{d0} does not fit in {ctx.n_slots} slots")
    flat = mat.reshape(-1)
    if zero_fill:
        out = np.zeros(ctx.n_slots)
        out[: flat.size] = flat
        return out
    return flat


def pack_matrix(ctx: SlotContext, mat: np.ndarray, log_scale: int | None = None,
                zero_fill: bool = False) -> SimPlaintext:
    return ctx.encode(_flatten(ctx, mat, zero_fill), log_scale)


def unpack_matrix(slots: np.ndarray, d: int) -> np.ndarray:
    """First tile of a packed slot vector as a d x d matrix."""
    return np.asarray(slots[: d * d], dtype=float).reshape(d, d).copy()


def encrypt_matrix(ctx: SlotContext, mat: np.ndarray, shear_power: int = 0,
                   zero_fill: bool = False) -> PackedMatrix:
    d = np.asarray(mat).shape[0]
    ct = ctx.encrypt(pack_matrix(ctx, mat, zero_fill=zero_fill))
    return PackedMatrix(ct, d, shear_power)


def pack_sheared(ctx: SlotContext, mat: np.ndarray, shear_power: int) -> PackedMatrix:
    """Encrypt col_shear(mat, shear_power), tagged with that power."""
    return encrypt_matrix(ctx, col_shear(np.asarray(mat, dtype=float), shear_power),
                          shear_power)


def decode_packed(pm: PackedMatrix) -> np.ndarray:
    return unpack_matrix(pm.payload.slots, pm.dim)


# -- cleartext permutation oracles ---------------------------------------------

def rot_row(mat: np.ndarray, k: int) -> np.ndarray:
    """Row i of the result is row i+k of the input (cyclic)."""
    return np.roll(mat, -k, axis=0)


def rot_col(mat: np.ndarray, k: int) -> np.ndarray:
    """Column j of the result is column j+k of the input (cyclic)."""
    return np.roll(mat, -k, axis=1)


def shift_rows(mat: np.ndarray) -> np.ndarray:
    d = mat.shape[0]
    i, j = np.indices((d, d))
    return mat[i, (i + j) % d]


def shift_cols(mat: np.ndarray) -> np.ndarray:
    d = mat.shape[0]
    i, j = np.indices((d, d))
    return mat[(i + j) % d, j]


def col_shear(mat: np.ndarray, l: int) -> np.ndarray:
    d = mat.shape[0]
    i, j = np.indices((d, d))
    return mat[(i + l * j) % d, j]


# -- ciphertext-level matrix rotations -------------------------------------------

def ct_rot_row(ctx: SlotContext, pm: PackedMatrix, k: int) -> PackedMatrix:
    """Row rotation: one slot rotation, level preserved."""
    return PackedMatrix(ctx.rotate(pm.payload, (k % pm.dim) * pm.dim),
                        pm.dim, pm.shear_power)


def col_mask(d: int, k: int) -> np.ndarray:
    """1.0 where the column index is below d-k, else 0.0."""
    k %= d
    m = np.zeros((d, d))
    m[:, : d - k] = 1.0
    return m


def ct_rot_col_masked(ctx: SlotContext, pm: PackedMatrix, k: int) -> PackedMatrix:
    """Column rotation of a ciphertext matrix.

    Entries staying in their row come from rotate(k), wrapped ones from
    rotate(k-d); the complementary masks are applied in one fused linear
    combination, so the whole operation costs one level, two ciphertext
    rotations and two plaintext multiplications.
    """
    d = pm.dim
    k %= d
    main = ctx.rotate(pm.payload, k)
    wrap = ctx.rotate(pm.payload, k - d)
    m = col_mask(d, k)
    out = ctx.pc_linear([
        (pack_matrix(ctx, m), main),
        (pack_matrix(ctx, 1.0 - m), wrap),
    ])
    return PackedMatrix(out, d, pm.shear_power)


def pt_rot_row(ctx: SlotContext, pt: SimPlaintext, d: int, k: int) -> SimPlaintext:
    return ctx.pt_rotate(pt, (k % d) * d)


def pt_rot_col(ctx: SlotContext, pt: SimPlaintext, d: int, k: int) -> SimPlaintext:
    """Plaintext column rotation: two plaintext rotations, masks folded in
    clear (depth-free)."""
    k %= d
    if k == 0:
        return pt
    main = ctx.pt_rotate(pt, k)
    wrap = ctx.pt_rotate(pt, k - d)
    m = np.tile(col_mask(d, k).reshape(-1), ctx.n_slots // (d * d))
    return SimPlaintext(m * main.slots + (1.0 - m) * wrap.slots, pt.log_scale)


# -- file formats -----------------------------------------------------------------

def save_matrix_csv(path, mat: np.ndarray, tau_power: int = 0) -> None:
    """CSV rows plus a .meta.json sidecar carrying dim and tau_power."""
    mat = np.asarray(mat, dtype=float)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(mat.tolist())
    with open(path.with_suffix(path.suffix + ".meta.json"), "w") as fh:
        json.dump({"dim": mat.shape[0], "tau_power": tau_power}, fh)


def load_matrix_csv(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    with open(path, newline="") as fh:
        mat = np.array([[float(x) for x in row] for row in csv.reader(fh) if row])
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    tau_power = 0
    if meta_path.exists():
        with open(meta_path) as fh:
            meta = json.load(fh)
        tau_power = int(meta.get("tau_power", 0))
        if int(meta.get("dim", mat.shape[0])) != mat.shape[0]:
            raise ValueError("sidecar dim disagrees with CSV contents")
    return mat, tau_power


def save_matrix_json(path, mat: np.ndarray, tau_power: int = 0) -> None:
    mat = np.asarray(mat, dtype=float)
    with open(path, "w") as fh:
        json.dump({"dim": mat.shape[0], "tau_power": tau_power,
                   "rows": mat.tolist()}, fh, indent=1)


def load_matrix_json(path) -> tuple[np.ndarray, int]:
    with open(path) as fh:
        data = json.load(fh)
    mat = np.asarray(data["rows"], dtype=float)
    if mat.shape[0] != data.get("dim", mat.shape[0]):
        raise ValueError("header dim disagrees with row count")
    return mat, int(data.get("tau_power", 0))
