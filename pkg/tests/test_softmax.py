"""Two-track softmax: calibration, main-track levels, auxiliary bootstraps."""

import dataclasses

import numpy as np
import pytest

from hesim import (NeedsBootstrapError, RangeTable, SimParams, SlotContext,
                   calibrate_softmax, col_shear, pack_sheared, softmax_clear,
                   softmax_encrypted, softmax_on_tau_packed, strided_norm_sq)
from hesim.packing import decode_packed
from hesim.polyapprox import depth_of


def make_ctx(slot_count=128, noise_bits=None, seed=0):
    return SlotContext(SimParams(slot_count=slot_count, noise_bits=noise_bits,
                                 seed=seed))


def nonzero(diff):
    return {k: v for k, v in diff.items() if v}


# ---------------------------------------------------------------- oracle

def test_clear_all_equal_gives_uniform():
    np.testing.assert_allclose(softmax_clear(np.full(8, 3.7)), np.full(8, 0.125))


def test_clear_saturates_on_large_gaps():
    np.testing.assert_allclose(softmax_clear(np.array([0.0, -1e9])),
                               [1.0, 0.0], atol=1e-12)


def test_clear_normalizes():
    x = np.random.default_rng(0).uniform(-5, 5, 8)
    assert abs(softmax_clear(x).sum() - 1.0) < 1e-12


def test_clear_translation_invariance():
    x = np.random.default_rng(1).uniform(-5, 5, 8)
    np.testing.assert_allclose(softmax_clear(x), softmax_clear(x + 13.25),
                               atol=1e-12)


def test_clear_rotation_equivariance():
    x = np.random.default_rng(2).uniform(-5, 5, 8)
    for r in (1, 3, 7):
        np.testing.assert_allclose(softmax_clear(np.roll(x, r)),
                                   np.roll(softmax_clear(x), r), atol=1e-12)


def test_clear_axis_argument():
    m = np.random.default_rng(3).uniform(-3, 3, (4, 4))
    by_cols = softmax_clear(m, axis=0)
    for j in range(4):
        np.testing.assert_allclose(by_cols[:, j], softmax_clear(m[:, j]))


# ---------------------------------------------------------------- calibration

def test_calibrate_defaults_hit_eight_main_levels():
    plan = calibrate_softmax(128)
    assert plan.halving_steps == 2
    assert plan.exp_fit.degree == 15
    assert plan.main_levels == 8  # 2k + ceil(log2(deg+1)) = 4 + 4


def test_calibrate_level_formula_across_configs():
    # low-degree aux fits: the main-track formula only sees k and exp_degree
    for k in (1, 2, 3):
        for deg in (7, 15, 16):
            plan = calibrate_softmax(16, halving_steps=k, exp_degree=deg,
                                     mid_degree=15, final_degree=31)
            assert plan.main_levels == 2 * k + depth_of(deg)


def test_calibrate_rejects_unstable_exp_degree():
    with pytest.raises(ValueError):
        calibrate_softmax(16, exp_degree=17)


def test_calibrate_range_override():
    ranges = dataclasses.replace(RangeTable(), softmax_max_abs=8.0,
                                 halving_steps=1)
    plan = calibrate_softmax(16, ranges=ranges)
    assert plan.max_abs == 8.0 and plan.halving_steps == 1


# ---------------------------------------------------------------- norm kernel

def test_strided_norm_pythagorean_example():
    ctx = make_ctx(slot_count=8)
    out = strided_norm_sq(ctx, ctx.encrypt_values([3.0, 4.0]), 2, 1)
    assert np.isclose(ctx.decrypt_values(out)[0], 25.0)


def test_strided_norm_zeros():
    ctx = make_ctx(slot_count=8)
    out = strided_norm_sq(ctx, ctx.encrypt_values(np.zeros(8)), 8, 1)
    np.testing.assert_allclose(ctx.decrypt_values(out), np.zeros(8),
                               atol=1e-15)


def test_strided_norm_matches_clear_and_counts():
    ctx = make_ctx(slot_count=64)
    x = np.random.default_rng(4).uniform(-1, 1, 16)
    ct = ctx.encrypt_values(x)
    before = ctx.ledger.snapshot()
    out = strided_norm_sq(ctx, ct, 16, 1)
    d = nonzero(ctx.ledger.diff(before))
    assert d == {"cc_mults": 1, "ct_rotations": 4}
    assert np.abs(ctx.decrypt_values(out)[0] - np.sum(x * x)) < 2.0 ** -35


def test_strided_norm_interleaved_groups():
    ctx = make_ctx(slot_count=32)
    rng = np.random.default_rng(5)
    cols = rng.uniform(-1, 1, (8, 4))  # four interleaved groups, stride 4
    ct = ctx.encrypt_values(cols.reshape(-1))
    out = ctx.decrypt_values(strided_norm_sq(ctx, ct, 8, 4))
    for j in range(4):
        assert np.isclose(out[j], np.sum(cols[:, j] ** 2)), j


def test_strided_norm_validates_shape():
    ctx = make_ctx(slot_count=16)
    ct = ctx.encrypt_values(np.zeros(16))
    with pytest.raises(ValueError):
        strided_norm_sq(ctx, ct, 3, 1)
    with pytest.raises(ValueError):
        strided_norm_sq(ctx, ct, 16, 2)


# ---------------------------------------------------------------- encrypted

def test_encrypted_constant_input_gives_uniform(plan128):
    ctx = make_ctx()
    ct = ctx.encrypt_values(np.full(128, -4.0))
    out, _ = softmax_encrypted(ctx, ct, plan128)
    np.testing.assert_allclose(ctx.decrypt_values(out), np.full(128, 1 / 128),
                               atol=2.0 ** -12)


def test_encrypted_headline_config(plan128):
    ctx = make_ctx()
    x = np.random.default_rng(6).uniform(-32.78, 0.0, 128)
    x[17] = 0.0
    ct = ctx.encrypt_values(x)
    out, track = softmax_encrypted(ctx, ct, plan128)
    got = ctx.decrypt_values(out)
    assert np.max(np.abs(got - softmax_clear(x))) < 2.0 ** -12
    assert track.main_levels_used == 8
    assert track.total_bootstraps == track.aux_bootstraps
    assert track.exit_level == track.entry_level - 8
    assert abs(got.sum() - 1.0) < 2.0 ** -10


def test_encrypted_noisy_mode_stays_within_coarse_budget(plan128):
    ctx = make_ctx(noise_bits=30)
    x = np.random.default_rng(7).uniform(-32.78, 0.0, 128)
    x[3] = 0.0
    out, track = softmax_encrypted(ctx, ctx.encrypt_values(x), plan128)
    assert np.max(np.abs(ctx.decrypt_values(out) - softmax_clear(x))) < 2 ** -8
    assert track.total_bootstraps == track.aux_bootstraps


def test_encrypted_strided_instances_are_independent():
    plan = calibrate_softmax(8)
    ctx = make_ctx(slot_count=32)
    rng = np.random.default_rng(8)
    cols = rng.uniform(-6.0, 0.0, (8, 4))
    ct = ctx.encrypt_values(cols.reshape(-1))
    out, _ = softmax_encrypted(ctx, ct, plan, stride=4)
    got = ctx.decrypt_values(out).reshape(8, 4)
    for j in range(4):
        np.testing.assert_allclose(got[:, j], softmax_clear(cols[:, j]),
                                   atol=2.0 ** -12)


def test_encrypted_level_budget_holds_off_headline_configs():
    for k, deg in ((1, 15), (2, 7), (3, 15)):
        plan = calibrate_softmax(16, halving_steps=k, exp_degree=deg,
                                 mid_degree=15, final_degree=63)
        ctx = make_ctx(slot_count=16)
        x = np.random.default_rng(9).uniform(-plan.max_abs, 0.0, 16)
        out, track = softmax_encrypted(ctx, ctx.encrypt_values(x), plan)
        assert track.main_levels_used == plan.main_levels
        assert track.total_bootstraps == track.aux_bootstraps


def test_encrypted_needs_main_track_levels(plan128):
    ctx = make_ctx()
    ct = ctx.level_down(ctx.encrypt_values(np.zeros(128)),
                        plan128.main_levels - 1)
    with pytest.raises(NeedsBootstrapError):
        softmax_encrypted(ctx, ct, plan128)


def test_halving_the_range_never_hurts():
    x_rel = np.random.default_rng(10).uniform(-1.0, 0.0, 16)
    errs = []
    for m_abs in (32.78, 16.39):
        ranges = dataclasses.replace(RangeTable(), softmax_max_abs=m_abs)
        plan = calibrate_softmax(16, ranges=ranges)
        ctx = make_ctx(slot_count=16)
        x = x_rel * m_abs
        out, _ = softmax_encrypted(ctx, ctx.encrypt_values(x), plan)
        errs.append(np.max(np.abs(ctx.decrypt_values(out) - softmax_clear(x))))
    assert errs[1] <= errs[0]


# ---------------------------------------------------------------- tau packed

def test_tau_packed_matches_columnwise_oracle(plan8):
    ctx = make_ctx(slot_count=64)
    m = np.random.default_rng(11).uniform(-6.0, 0.0, (8, 8))
    pm = pack_sheared(ctx, m, 1)
    out, track = softmax_on_tau_packed(ctx, pm, plan8)
    assert out.shear_power == 1
    want = col_shear(softmax_clear(m, axis=0), 1)
    np.testing.assert_allclose(decode_packed(out), want, atol=2.0 ** -12)
    assert track.total_bootstraps == track.aux_bootstraps


def test_tau_packed_identical_columns(plan8):
    ctx = make_ctx(slot_count=64)
    col = np.random.default_rng(12).uniform(-6.0, 0.0, 8)
    m = np.tile(col[:, None], (1, 8))
    pm = pack_sheared(ctx, m, 1)
    out, _ = softmax_on_tau_packed(ctx, pm, plan8)
    want = col_shear(np.tile(softmax_clear(col)[:, None], (1, 8)), 1)
    np.testing.assert_allclose(decode_packed(out), want, atol=2.0 ** -12)


def test_tau_packed_rejects_wrong_shear(plan8):
    ctx = make_ctx(slot_count=64)
    m = np.random.default_rng(13).uniform(-6.0, 0.0, (8, 8))
    from hesim import encrypt_matrix
    with pytest.raises(ValueError):
        softmax_on_tau_packed(ctx, encrypt_matrix(ctx, m), plan8)


def test_tau_packed_rejects_plan_dim_mismatch(plan8):
    ctx = make_ctx(slot_count=16)
    m = np.random.default_rng(14).uniform(-6.0, 0.0, (4, 4))
    with pytest.raises(ValueError):
        softmax_on_tau_packed(ctx, pack_sheared(ctx, m, 1), plan8)
