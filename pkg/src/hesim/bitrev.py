"""Bit-reverse permutation bookkeeping.

Converting between slot encoding and coefficient encoding via radix-2 FFT
steps leaves indices bit-reversed, so plaintext operands have to be
pre-shuffled to stay compatible.  This module holds the index permutations
involved and the matrix shuffle built from them, as pure combinatorics.
"""

from __future__ import annotations

import numpy as np


def bit_reverse(x: int, k: int) -> int:
    """Reverse x as a k-bit string."""
    if not 0 <= x < (1 << k):
        raise ValueError(f"{x} is not a {k}-bit value")
    r = 0
    for t in range(k):
        r |= ((x >> t) & 1) << (k - 1 - t)
    return r


def rotate_bits_down(x: int, k: int) -> int:
    """Send the last bit of x to the highest bit (cyclic right shift in k
    bits): x/2 when even, (x-1)/2 + 2^(k-1) when odd."""
    if not 0 <= x < (1 << k):
        raise ValueError(f"{x} is not a {k}-bit value")
    return x // 2 if x % 2 == 0 else (x - 1) // 2 + (1 << (k - 1))


def byte_mix(x: int) -> int:
    """Involution on [0,256) aligning nibble-interleaved layouts.

    Bits a7..a0 map to a3 a4 a5 a6 a7 a0 a1 a2 (MSB first).  Equivalently
    rotate_bits_down(bit_reverse(nibble_swap(x), 8), 8); the reverse width
    must be 8 for the nibble-swap structure to compose.
    """
    if not 0 <= x < 256:
        raise ValueError(f"{x} is not a byte")
    a = [(x >> t) & 1 for t in range(8)]
    out = 0
    for b in (a[3], a[4], a[5], a[6], a[7], a[0], a[1], a[2]):
        out = (out << 1) | b
    return out


def half_reverse(x: int) -> int:
    """Involution on [0,4096): fix the top bit, reverse the low 11 bits."""
    if not 0 <= x < 4096:
        raise ValueError(f"{x} is not a 12-bit value")
    if x < 2048:
        return bit_reverse(x, 11)
    return bit_reverse(x - 2048, 11) + 2048


def shuffle_matrix(mat: np.ndarray, perm=byte_mix) -> np.ndarray:
    """Conjugate a matrix by an index permutation: M'[i][j] = M[p(i)][p(j)].

    Conjugation commutes with matrix multiplication, so operands shuffled
    once stay mutually consistent through a whole product chain.
    """
    mat = np.asarray(mat)
    n = mat.shape[0]
    if mat.shape != (n, n):
        raise ValueError("matrix must be square")
    idx = np.fromiter((perm(i) for i in range(n)), dtype=np.intp, count=n)
    if idx.max() >= n:
        raise ValueError("permutation domain larger than the matrix")
    return mat[np.ix_(idx, idx)].copy()


def check_all(verbose: bool = False) -> dict[str, bool]:
    """Domain-exhaustive properties, returned as name -> bool."""
    rng = np.random.default_rng(0)
    results: dict[str, bool] = {}
    results["bit_reverse involution"] = all(
        bit_reverse(bit_reverse(x, k), k) == x
        for k in range(1, 13) for x in range(1 << k))
    results["rotate_bits_down bijective"] = (
        len({rotate_bits_down(x, 8) for x in range(256)}) == 256)
    results["byte_mix involution"] = all(byte_mix(byte_mix(x)) == x for x in range(256))
    results["byte_mix anchor values"] = (byte_mix(1) == 4 and byte_mix(4) == 1
                                         and byte_mix(0) == 0 and byte_mix(255) == 255)
    results["byte_mix nibble identity"] = all(
        byte_mix(16 * i + j) == rotate_bits_down(bit_reverse(i + 16 * j, 8), 8)
        for i in range(16) for j in range(16))
    results["half_reverse involution"] = all(half_reverse(half_reverse(x)) == x
                                             for x in range(4096))
    a = rng.standard_normal((256, 256))
    b = rng.standard_normal((256, 256))
    lhs = shuffle_matrix(a) @ shuffle_matrix(b)
    rhs = shuffle_matrix(a @ b)
    results["shuffle conjugation homomorphism"] = bool(
        np.max(np.abs(lhs - rhs)) < 1e-9 * max(1.0, np.max(np.abs(rhs))))
    if verbose:
        for name, ok in results.items():
            print(f"{'PASS' if ok else 'FAIL'}: {name}")
    return results
