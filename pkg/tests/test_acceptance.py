"""Acceptance gate: fourteen structural and numerical criteria.

Each criterion is one test, so a verbose run prints one pass/fail line per
criterion.  Tolerances and runtime budgets are pinned here and must not be
relaxed; every numeric expectation is checked against an independent
cleartext oracle computed in the test itself.
"""

import time

import numpy as np
import pytest

from hesim import (BoundsProfile, SimParams, SlotContext, bit_reverse,
                   build_tree, byte_mix, calibrate_softmax, ccmm_baseline,
                   chebyshev_fit, clear_pcmm, col_shear, encrypt_matrix,
                   half_reverse, make_pcmm_plan, pack_sheared, pcmm_bsgs,
                   pcmm_depth1, shuffle_matrix, slim_eval, softmax_clear,
                   softmax_encrypted, split_sos)
from hesim.matmul import BsgsSplit, derive_pt_block
from hesim.packing import decode_packed, rot_col, rot_row, shift_cols
from hesim.pipeline import attention_demo, chunked_prefill, decode_step, \
    demo_tokens, full_prefill
from hesim.pipeline import PrefillSplit, ToyModelConfig
from hesim.polyapprox import eval_clear
from hesim.sospoly import decode_slim
from hesim.bitrev import rotate_bits_down

EXP_INTERVAL = (-8.195, 0.0)


def make_ctx(slot_count=256, noise_bits=None, seed=0):
    return SlotContext(SimParams(slot_count=slot_count, noise_bits=noise_bits,
                                 seed=seed))


def rand(d, seed):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, (d, d))


def check_budget(t0, budget_s, label):
    elapsed = time.perf_counter() - t0
    assert elapsed < budget_s, f"{label}: {elapsed:.2f}s over {budget_s}s budget"


# -----------------------------------------------------------------------------

def test_c01_pcmm_consumes_exactly_one_level():
    t0 = time.perf_counter()
    ctx = make_ctx()
    for d in (2, 4, 8, 16):
        for power in range(4):
            plan = make_pcmm_plan(ctx, rand(d, seed=d + power),
                                  shear_power=power)
            ct = pack_sheared(ctx, rand(d, seed=d * 7 + power), power + 1)
            for kernel in (pcmm_depth1, pcmm_bsgs):
                out = kernel(ctx, plan, ct)
                assert ct.level - out.level == 1, (d, power, kernel.__name__)
    check_budget(t0, 1.0, "criterion 1")


def test_c02_pcmm_matches_sheared_clear_product():
    t0 = time.perf_counter()
    ctx = make_ctx()
    for d in (2, 4, 8, 16):
        for power in range(4):
            tol = d * 2.0 ** -38
            for trial in range(50):
                seed = hash((d, power, trial)) % (2 ** 32)
                a, b = rand(d, seed), rand(d, seed + 1)
                plan = make_pcmm_plan(ctx, a, shear_power=power)
                ct = pack_sheared(ctx, b, power + 1)
                kernel = pcmm_depth1 if trial % 2 else pcmm_bsgs
                got = decode_packed(kernel(ctx, plan, ct))
                assert np.max(np.abs(got - clear_pcmm(a, b, power))) < tol
    check_budget(t0, 10.0, "criterion 2")


def test_c03_bsgs_rotation_budget_six_vs_fifteen():
    t0 = time.perf_counter()
    ctx = make_ctx()
    plan = make_pcmm_plan(ctx, rand(16, seed=0), split=BsgsSplit(4, 4))
    ct = pack_sheared(ctx, rand(16, seed=1), 1)
    before = ctx.ledger.snapshot()
    pcmm_bsgs(ctx, plan, ct)
    assert ctx.ledger.diff(before)["ct_rotations"] == 6
    before = ctx.ledger.snapshot()
    pcmm_depth1(ctx, plan, ct)
    assert ctx.ledger.diff(before)["ct_rotations"] == 15
    check_budget(t0, 1.0, "criterion 3")


def test_c04_on_the_fly_blocks_bitwise_equal_eager():
    t0 = time.perf_counter()
    ctx = make_ctx()
    for power in range(3):
        a = rand(8, seed=90 + power)
        eager = make_pcmm_plan(ctx, a, shear_power=power)
        lazy = make_pcmm_plan(ctx, a, shear_power=power, on_the_fly=True)
        for j in range(eager.split.giant):
            for i in range(eager.split.baby):
                want = derive_pt_block(ctx, eager, i, j)
                before = ctx.ledger.snapshot()
                got = derive_pt_block(ctx, lazy, i, j)
                assert ctx.ledger.diff(before)["pt_rotations"] <= 2
                np.testing.assert_array_equal(got.slots, want.slots)
    check_budget(t0, 1.0, "criterion 4")


def test_c05_ccmm_three_levels_and_exact():
    t0 = time.perf_counter()
    ctx = make_ctx()
    for d in (2, 4, 8):
        a, b = rand(d, seed=d), rand(d, seed=d + 40)
        A, B = encrypt_matrix(ctx, a), encrypt_matrix(ctx, b)
        out = ccmm_baseline(ctx, A, B)
        assert A.level - out.level == 3, d
        assert np.max(np.abs(decode_packed(out) - a @ b)) < 1e-9, d
    check_budget(t0, 5.0, "criterion 5")


def test_c06_shear_commutation_identities_exhaustive():
    t0 = time.perf_counter()
    for d in (2, 4, 8, 16):
        for trial in range(20):
            m = rand(d, seed=1000 * d + trial)
            for k in range(d):
                np.testing.assert_array_equal(
                    shift_cols(rot_row(m, k)), rot_row(shift_cols(m), k))
                np.testing.assert_array_equal(
                    shift_cols(rot_col(m, k)),
                    rot_row(rot_col(shift_cols(m), k), -k))
    check_budget(t0, 5.0, "criterion 6")


def test_c07_sos_reconstruction_within_one_ppm():
    t0 = time.perf_counter()

    def residual(coeffs, basis, interval):
        u, v, m = split_sos(coeffs, basis=basis, interval=interval)
        lo, hi = (-1.0, 1.0) if basis == "chebyshev" else interval
        x = np.linspace(lo, hi, 513)
        ev = (np.polynomial.chebyshev.chebval if basis == "chebyshev"
              else np.polynomial.polynomial.polyval)
        p = ev(x, coeffs)
        back = ev(x, u) ** 2 + ev(x, v) ** 2 - m
        return np.max(np.abs(back - p)) / max(1.0, np.max(np.abs(p)))

    rng = np.random.default_rng(7)
    for trial in range(100):
        deg = 2 * int(rng.integers(1, 9))
        c = rng.uniform(-1.0, 1.0, deg + 1)
        c[-1] = abs(c[-1]) + 0.5
        assert residual(c, "monomial", (-1.0, 1.0)) < 1e-6, trial
    p = chebyshev_fit(np.exp, EXP_INTERVAL, 16, target_fn="exp")
    assert residual(p.coeffs, "chebyshev", p.interval) < 1e-6
    check_budget(t0, 30.0, "criterion 7")


def test_c08_slim_eval_depth_rotations_and_noise():
    t0 = time.perf_counter()
    p = chebyshev_fit(np.exp, EXP_INTERVAL, 16, target_fn="exp")
    lo, hi = p.interval
    x = np.linspace(-8.0, -0.1, 8)
    u = 2.0 * (x - lo) / (hi - lo) - 1.0
    for depth in (1, 2):
        tree = build_tree(p, depth)
        ctx = make_ctx(slot_count=64)
        ct = ctx.encrypt_values(u)
        before = ctx.ledger.snapshot()
        out = slim_eval(ctx, tree, ct, used_slots=8)
        assert ct.level - out.level == tree.k + 1
        assert ctx.ledger.diff(before)["ct_rotations"] == depth
        got = decode_slim(ctx, out, 8)
        clear = eval_clear(tree.root_poly(), u)
        assert np.max(np.abs(got - clear)) < 2.0 ** -30
        # noisy mode: at most depth+2 bits over the fresh 2^-30 floor
        noisy = make_ctx(slot_count=64, noise_bits=30)
        nv = decode_slim(noisy, slim_eval(noisy, tree,
                                          noisy.encrypt_values(u), 8), 8)
        lost = 30.0 + np.log2(np.max(np.abs(nv - got)))
        assert lost <= depth + 2
    # the fused variant saves the leaf level on a monic-scalable tree
    ctx = make_ctx(slot_count=64)
    from hesim import ApproxPoly
    from hesim.sospoly import fused_input_scale
    mono = ApproxPoly(np.concatenate([np.zeros(16), [1.0]]), "monomial",
                      (-1.0, 1.0))
    ftree = build_tree(mono, 1)
    scale = fused_input_scale(ftree, 8, ctx.n_slots)
    vals = np.linspace(-0.9, 0.9, 8)
    fct = ctx.encrypt(ctx.encode(np.tile(vals, ctx.n_slots // 8) * scale))
    fout = slim_eval(ctx, ftree, fct, used_slots=8, fused=True)
    assert fct.level - fout.level == ftree.k
    np.testing.assert_allclose(decode_slim(ctx, fout, 8), vals ** 16,
                               atol=2.0 ** -30)
    check_budget(t0, 30.0, "criterion 8")


def test_c09_softmax_two_track_headline():
    t0 = time.perf_counter()
    plan = calibrate_softmax(128)
    assert plan.halving_steps == 2
    assert plan.exp_fit.degree == 15
    assert plan.iters[-1].tree.root_poly().degree == 128
    ctx = make_ctx(slot_count=128)
    x = np.random.default_rng(42).uniform(-32.78, 0.0, 128)
    x[5] = 0.0
    out, track = softmax_encrypted(ctx, ctx.encrypt_values(x), plan)
    err = np.max(np.abs(ctx.decrypt_values(out) - softmax_clear(x)))
    assert err < 2.0 ** -12
    assert track.main_levels_used == 8
    assert track.total_bootstraps == track.aux_bootstraps  # none in main
    assert track.aux_bootstraps > 0  # and the aux track did bootstrap
    check_budget(t0, 60.0, "criterion 9")


def test_c10_chunked_prefill_every_split_and_decode():
    t0 = time.perf_counter()
    cfg = ToyModelConfig()
    tokens = demo_tokens(32, cfg.d_model)
    want, _ = full_prefill(tokens, cfg)
    for ptok in range(32):
        got, _ = chunked_prefill(tokens, PrefillSplit(32, ptok, 32 - ptok),
                                 cfg)
        assert np.max(np.abs(got - want)) < 1e-6, ptok
    # decode consistency: 8 generated steps replayed against a prefix cache
    full_logits, _ = full_prefill(tokens[:32], cfg)
    _, cache = full_prefill(tokens[:24], cfg)
    logits = None
    for step in range(24, 32):
        logits, cache = decode_step(cache, tokens[step], cfg)
    assert np.max(np.abs(logits - full_logits)) < 1e-6
    check_budget(t0, 30.0, "criterion 10")


def test_c11_bit_reverse_suite():
    t0 = time.perf_counter()
    for x in range(256):
        assert byte_mix(byte_mix(x)) == x
    for x in range(4096):
        assert half_reverse(half_reverse(x)) == x
    # mixed-radix identity on all 256 points (full-width bit reverse)
    for i in range(16):
        for j in range(16):
            assert byte_mix(16 * i + j) == \
                rotate_bits_down(bit_reverse(i + 16 * j, 8), 8)
    rng = np.random.default_rng(11)
    a = rng.uniform(-1, 1, (256, 256))
    b = rng.uniform(-1, 1, (256, 256))
    lhs = shuffle_matrix(a) @ shuffle_matrix(b)
    rhs = shuffle_matrix(a @ b)
    assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) < 1e-9
    check_budget(t0, 10.0, "criterion 11")


def test_c12_scaled_bootstrap_noise_accounting():
    t0 = time.perf_counter()
    ctx = make_ctx(slot_count=8, noise_bits=30)
    bounds = np.array([1.0, 2.0, 8.0, 8.0, 32.0, 1.0, 4.0, 16.0])
    # in-bound values stay strictly inside their bound: encoding in noisy
    # mode jitters slots by up to 2^-p, and a slot pushed past its bound
    # would (correctly) start paying the excess penalty
    values = np.array([0.5, 1.5, -3.0, 16.0, 8.0, 0.25, 3.0, -32.0])
    ct = ctx.level_down(ctx.encrypt_values(values), 0)
    out = ctx.scaled_bootstrap(ct, BoundsProfile(bounds))
    floor = 2.0 ** -30
    in_bound = np.abs(values) <= bounds
    np.testing.assert_array_equal(out.noise_est[in_bound],
                                  bounds[in_bound] * floor)
    doubled = np.abs(values) == 2.0 * bounds
    extra = np.log2(out.noise_est[doubled] / floor)
    # the input's own encoding jitter shifts the measured ratio at the
    # 1e-10-bit scale; one millionth of a bit is the pinned tolerance
    np.testing.assert_allclose(extra, np.log2(bounds[doubled]) + 2.0,
                               atol=1e-6)
    check_budget(t0, 1.0, "criterion 12")


def test_c13_sqrt_scale_products_skip_rescaling():
    t0 = time.perf_counter()
    ctx = make_ctx()
    half = ctx.params.log_scale // 2
    before = ctx.ledger.snapshot()
    prod = ctx.pt_pt_mult_sqrt_scale(ctx.encode([3.0], log_scale=half),
                                     ctx.encode([-7.0], log_scale=half))
    assert prod.log_scale == ctx.params.log_scale
    assert ctx.ledger.diff(before)["rescales"] == 0
    np.testing.assert_allclose(prod.slots[:1], [-21.0])
    check_budget(t0, 1.0, "criterion 13")


def test_c14_attention_demo_exact_and_noisy():
    t0 = time.perf_counter()
    exact = attention_demo(d=8)
    assert exact["max_abs_error"] < 2.0 ** -10
    assert exact["main_bootstraps"] == 0
    assert exact["out_tau_power"] == 0
    noisy = attention_demo(d=8, noise_bits=30)
    assert noisy["max_abs_error"] < 2.0 ** -8
    assert noisy["main_bootstraps"] == 0
    check_budget(t0, 60.0, "criterion 14")
