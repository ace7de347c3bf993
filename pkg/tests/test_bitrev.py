"""Bit-reversal permutations and the conjugation bookkeeping they induce."""

import numpy as np
import pytest

from hesim import bit_reverse, byte_mix, half_reverse, shuffle_matrix
from hesim.bitrev import check_all, rotate_bits_down


# ---------------------------------------------------------------- bit_reverse

def test_bit_reverse_examples():
    assert bit_reverse(1, 3) == 4
    assert bit_reverse(0, 8) == 0
    assert bit_reverse(1, 8) == 128
    assert bit_reverse(6, 3) == 3


def test_bit_reverse_is_an_involution():
    for k in (1, 3, 8, 11):
        for x in range(1 << k):
            assert bit_reverse(bit_reverse(x, k), k) == x


def test_bit_reverse_rejects_out_of_range():
    with pytest.raises(ValueError):
        bit_reverse(8, 3)
    with pytest.raises(ValueError):
        bit_reverse(-1, 3)


# ---------------------------------------------------------------- rotate down

def test_rotate_bits_down_examples():
    assert rotate_bits_down(0, 8) == 0
    assert rotate_bits_down(2, 8) == 1
    assert rotate_bits_down(1, 8) == 128
    assert rotate_bits_down(3, 8) == 129


def test_rotate_bits_down_halves_even_values():
    for x in range(0, 256, 2):
        assert rotate_bits_down(x, 8) == x // 2


def test_rotate_bits_down_is_a_bijection():
    assert sorted(rotate_bits_down(x, 8) for x in range(256)) == list(range(256))


# ---------------------------------------------------------------- byte_mix

def test_byte_mix_anchor_values():
    assert byte_mix(0) == 0
    assert byte_mix(255) == 255
    assert byte_mix(1) == 4
    assert byte_mix(4) == 1


def test_byte_mix_is_an_involution_on_all_bytes():
    for x in range(256):
        assert byte_mix(byte_mix(x)) == x


def test_byte_mix_is_a_bijection():
    assert sorted(byte_mix(x) for x in range(256)) == list(range(256))


def test_byte_mix_nibble_identity_holds_on_all_256_points():
    # byte_mix(16i + j) == rotate_bits_down(bit_reverse(i + 16j, 8), 8);
    # the identity needs the full 8-bit reverse: i + 16j covers [0, 256)
    for i in range(16):
        for j in range(16):
            assert byte_mix(16 * i + j) == \
                rotate_bits_down(bit_reverse(i + 16 * j, 8), 8)


def test_byte_mix_rejects_non_bytes():
    with pytest.raises(ValueError):
        byte_mix(256)


# ---------------------------------------------------------------- half_reverse

def test_half_reverse_anchor_values():
    assert half_reverse(0) == 0
    assert half_reverse(2048) == 2048
    assert half_reverse(1) == 1024


def test_half_reverse_fixes_the_top_bit():
    for x in (0, 5, 1023, 2047):
        assert half_reverse(x) < 2048
        assert half_reverse(x + 2048) == half_reverse(x) + 2048


def test_half_reverse_is_an_involution_on_twelve_bits():
    for x in range(4096):
        assert half_reverse(half_reverse(x)) == x


def test_half_reverse_rejects_out_of_range():
    with pytest.raises(ValueError):
        half_reverse(4096)


# ---------------------------------------------------------------- shuffling

def test_shuffle_is_an_involution():
    m = np.random.default_rng(0).uniform(-1, 1, (256, 256))
    np.testing.assert_array_equal(shuffle_matrix(shuffle_matrix(m)), m)


def test_shuffle_fixes_the_identity_matrix():
    np.testing.assert_array_equal(shuffle_matrix(np.eye(256)), np.eye(256))


def test_shuffle_conjugation_commutes_with_matmul():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (256, 256))
    b = rng.uniform(-1, 1, (256, 256))
    lhs = shuffle_matrix(a) @ shuffle_matrix(b)
    rhs = shuffle_matrix(a @ b)
    rel = np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs))
    assert rel < 1e-9


def test_shuffle_with_custom_permutation():
    m = np.random.default_rng(2).uniform(-1, 1, (16, 16))
    out = shuffle_matrix(m, perm=lambda x: (x + 1) % 16)
    np.testing.assert_array_equal(out[0, 0], m[1, 1])


def test_shuffle_rejects_non_square():
    with pytest.raises(ValueError):
        shuffle_matrix(np.ones((2, 3)))


def test_shuffle_rejects_small_matrix_for_byte_perm():
    with pytest.raises(ValueError):
        shuffle_matrix(np.ones((16, 16)))  # byte_mix needs 256 rows


# ---------------------------------------------------------------- check_all

def test_check_all_properties_hold():
    report = check_all()
    assert report, "empty property report"
    for name, ok in report.items():
        assert ok, name
