"""Toy decoder block: chunked prefill, decode, encrypted attention chain."""

import numpy as np
import pytest

from hesim import (KvCache, PrefillSplit, SimParams, SlotContext,
                   ToyModelConfig, attention_demo, cc_attention_report,
                   chunked_prefill, col_shear, cost_report, decode_step,
                   ffn_check, full_prefill, pack_sheared,
                   pc_attention_encrypted, rope_packed, softmax_clear)
from hesim.packing import decode_packed, encrypt_matrix
from hesim.pipeline import (REPORT_KEYS, apply_rope, clear_pc_attention,
                            demo_tokens, make_weights, rms_norm, rope_columns)
from hesim.polyapprox import silu

GOLDEN_LOGITS = np.array([
    0.8013768405223419, -1.4519386787689814, 0.3290011168048186,
    1.0702551177535289, 0.1889394259368654, -0.5999763956570578,
    -0.8915550388459703, 0.05707975205319441,
])


def make_ctx(slot_count=64, noise_bits=None, seed=0):
    return SlotContext(SimParams(slot_count=slot_count, noise_bits=noise_bits,
                                 seed=seed))


# ---------------------------------------------------------------- clear model

def test_config_validation():
    with pytest.raises(ValueError):
        ToyModelConfig(d_model=8, d_head=4, n_heads=1)
    with pytest.raises(ValueError):
        ToyModelConfig(d_model=3, d_head=3, n_heads=1)


def test_demo_tokens_are_deterministic():
    np.testing.assert_array_equal(demo_tokens(4, 8), demo_tokens(4, 8))


def test_golden_logits_pinned():
    tokens = demo_tokens(32, 8, seed=7)[:8]
    logits, cache = full_prefill(tokens, ToyModelConfig())
    np.testing.assert_allclose(logits, GOLDEN_LOGITS, atol=1e-12)
    assert cache.n_tokens == 8


def test_single_token_prefill_matches_direct_formula():
    cfg = ToyModelConfig()
    w = make_weights(cfg)
    tok = demo_tokens(1, cfg.d_model, seed=3)
    logits, cache = full_prefill(tok, cfg)
    # one token attends only to itself: attention output is its own value row
    x = tok[0]
    lw = w.layers[0]
    xn = rms_norm(x)
    x = x + (xn @ lw.wv) @ lw.wo
    xn2 = rms_norm(x)
    x = x + (silu(xn2 @ lw.w_gate) * (xn2 @ lw.w_up)) @ lw.w_down
    np.testing.assert_allclose(logits, rms_norm(x) @ w.w_out, atol=1e-12)
    assert cache.n_tokens == 1


def test_chunked_prefill_matches_full_at_key_splits():
    cfg = ToyModelConfig()
    tokens = demo_tokens(32, cfg.d_model)
    want, full_cache = full_prefill(tokens, cfg)
    for ptok in (0, 16, 24, 31):
        split = PrefillSplit(32, ptok, 32 - ptok)
        got, cache = chunked_prefill(tokens, split, cfg)
        assert np.max(np.abs(got - want)) < 1e-6
        for layer in range(cfg.n_layers):
            np.testing.assert_allclose(cache.k[layer], full_cache.k[layer],
                                       atol=1e-9)
            np.testing.assert_allclose(cache.v[layer], full_cache.v[layer],
                                       atol=1e-9)


def test_chunked_prefill_multi_layer_multi_head():
    cfg = ToyModelConfig(d_model=8, d_head=4, n_heads=2, n_layers=2, seed=5)
    tokens = demo_tokens(16, cfg.d_model, seed=9)
    want, _ = full_prefill(tokens, cfg)
    got, _ = chunked_prefill(tokens, PrefillSplit(16, 11, 5), cfg)
    assert np.max(np.abs(got - want)) < 1e-6


def test_parallel_heads_are_bitwise_deterministic():
    cfg = ToyModelConfig(d_model=8, d_head=4, n_heads=2, seed=1)
    tokens = demo_tokens(12, cfg.d_model, seed=2)
    a, _ = full_prefill(tokens, cfg)
    b, _ = full_prefill(tokens, cfg, parallel=True)
    np.testing.assert_array_equal(a, b)


def test_decode_steps_extend_prefill_consistently():
    cfg = ToyModelConfig()
    tokens = demo_tokens(16, cfg.d_model)
    want, _ = full_prefill(tokens, cfg)
    _, cache = full_prefill(tokens[:8], cfg)
    logits = None
    for t in range(8, 16):
        logits, cache = decode_step(cache, tokens[t], cfg)
    assert np.max(np.abs(logits - want)) < 1e-9
    assert cache.n_tokens == 16


def test_prefill_split_validation():
    with pytest.raises(ValueError):
        PrefillSplit(8, 8, 0)   # private chunk may not be empty
    with pytest.raises(ValueError):
        PrefillSplit(8, 3, 4)
    with pytest.raises(ValueError):
        PrefillSplit(8, -1, 9)
    cfg = ToyModelConfig()
    with pytest.raises(ValueError):
        chunked_prefill(demo_tokens(4, 8), PrefillSplit(8, 4, 4), cfg)


def test_cache_check_rejects_layer_skew():
    cfg = ToyModelConfig(n_layers=2)
    cache = KvCache.empty(cfg)
    cache.append(0, np.zeros((2, 8)), np.zeros((2, 8)))
    with pytest.raises(ValueError):
        cache.check()


# ---------------------------------------------------------------- rope

def test_rope_at_position_zero_is_identity():
    x = np.random.default_rng(0).uniform(-1, 1, (1, 8))
    np.testing.assert_allclose(apply_rope(x, np.array([0])), x, atol=1e-15)


def test_rope_preserves_pairwise_norms():
    x = np.random.default_rng(1).uniform(-1, 1, (5, 8))
    y = apply_rope(x, np.arange(5))
    lo, hi = x[:, :4], x[:, 4:]
    lo2, hi2 = y[:, :4], y[:, 4:]
    np.testing.assert_allclose(lo2 ** 2 + hi2 ** 2, lo ** 2 + hi ** 2,
                               atol=1e-12)


def test_rope_columns_transposes_the_token_axis():
    m = np.random.default_rng(2).uniform(-1, 1, (8, 8))
    pos = np.arange(8, 16)
    np.testing.assert_allclose(rope_columns(m, pos),
                               apply_rope(m.T, pos).T, atol=1e-15)


def test_rope_packed_matches_clear_oracle():
    ctx = make_ctx()
    m = np.random.default_rng(3).uniform(-1, 1, (8, 8))
    pos = np.arange(8, 16)
    for power in (0, 2):
        pm = pack_sheared(ctx, m, power)
        before = ctx.ledger.snapshot()
        out = rope_packed(ctx, pm, pos)
        diff = ctx.ledger.diff(before)
        assert diff["ct_rotations"] == 1
        assert pm.level - out.level == 1
        assert out.shear_power == power
        np.testing.assert_allclose(decode_packed(out),
                                   col_shear(rope_columns(m, pos), power),
                                   atol=1e-12)


def test_rope_packed_rejects_plaintext():
    ctx = make_ctx()
    from hesim import PackedMatrix
    from hesim.packing import pack_matrix
    pm = PackedMatrix(pack_matrix(ctx, np.eye(8)), 8)
    with pytest.raises(TypeError):
        rope_packed(ctx, pm, np.arange(8))


# ---------------------------------------------------------------- attention

def chain_inputs(d=8, seed=0):
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    k_pub = rope_columns(rng.standard_normal((d, d)) * scale, np.arange(d))
    v_pub = rng.standard_normal((d, d)) * scale
    q = rng.standard_normal((d, d)) * scale
    k_new = rng.standard_normal((d, d)) * scale
    v_new = rng.standard_normal((d, d)) * scale
    return k_pub, v_pub, q, k_new, v_new


def test_pc_attention_matches_clear_oracle(plan8):
    ctx = make_ctx()
    k_pub, v_pub, q, k_new, v_new = chain_inputs()
    pos = 8 + np.arange(8)
    out, report = pc_attention_encrypted(
        ctx, pack_sheared(ctx, q, 2), pack_sheared(ctx, k_new, 2),
        pack_sheared(ctx, v_new, 2), k_pub, v_pub, plan8, positions=pos)
    want = clear_pc_attention(q, k_pub, v_pub, pos)
    assert out.shear_power == 0
    assert np.max(np.abs(decode_packed(out) - want)) < 2.0 ** -10
    assert report["main_bootstraps"] == 0
    names = [p["name"] for p in report["phases"]]
    assert names == ["rope", "pcmm_scores", "softmax", "pcmm_values"]
    assert [p["levels"] for p in report["phases"]] == [1, 1, 8, 1]


def test_pc_attention_populates_the_key_cache(plan8):
    ctx = make_ctx()
    k_pub, v_pub, q, k_new, v_new = chain_inputs(seed=4)
    pos = 8 + np.arange(8)
    _, report = pc_attention_encrypted(
        ctx, pack_sheared(ctx, q, 2), pack_sheared(ctx, k_new, 2),
        pack_sheared(ctx, v_new, 2), k_pub, v_pub, plan8, positions=pos)
    k_cache = report["cache_ready"]["k"]
    want = col_shear(rope_columns(k_new, pos), 2)
    np.testing.assert_allclose(decode_packed(k_cache), want, atol=1e-12)
    assert report["cache_ready"]["v"].shear_power == 2


def test_pc_attention_rejects_broken_tau_chain(plan8):
    ctx = make_ctx()
    k_pub, v_pub, q, k_new, v_new = chain_inputs(seed=5)
    before = ctx.ledger.snapshot()
    with pytest.raises(ValueError, match="shear chain"):
        pc_attention_encrypted(
            ctx, pack_sheared(ctx, q, 0), pack_sheared(ctx, k_new, 2),
            pack_sheared(ctx, v_new, 2), k_pub, v_pub, plan8)
    # rejected before any homomorphic work
    assert all(v == 0 for v in ctx.ledger.diff(before).values())


def test_pc_attention_rejects_plaintext_and_bad_dims(plan8):
    ctx = make_ctx()
    k_pub, v_pub, q, k_new, v_new = chain_inputs(seed=6)
    from hesim import PackedMatrix
    from hesim.packing import pack_matrix
    q_pt = PackedMatrix(pack_matrix(ctx, q), 8, 2)
    with pytest.raises(TypeError):
        pc_attention_encrypted(ctx, q_pt, pack_sheared(ctx, k_new, 2),
                               pack_sheared(ctx, v_new, 2), k_pub, v_pub,
                               plan8)
    with pytest.raises(ValueError):
        pc_attention_encrypted(ctx, pack_sheared(ctx, q, 2),
                               pack_sheared(ctx, k_new, 2),
                               pack_sheared(ctx, v_new, 2), k_pub[:4, :4],
                               v_pub, plan8)


def test_attention_demo_exact_and_noisy():
    exact = attention_demo(d=8)
    assert exact["max_abs_error"] < 2.0 ** -10
    assert exact["cache_key_error"] < 1e-12
    assert exact["out_tau_power"] == 0
    assert exact["main_bootstraps"] == 0
    noisy = attention_demo(d=8, noise_bits=30)
    assert noisy["max_abs_error"] < 2.0 ** -8
    assert noisy["main_bootstraps"] == 0


def test_attention_demo_is_deterministic():
    a = attention_demo(d=8, seed=3)
    b = attention_demo(d=8, seed=3)
    assert a["max_abs_error"] == b["max_abs_error"]
    assert a["cost"] == b["cost"]


# ---------------------------------------------------------------- cc chain

def test_cc_attention_report(plan8):
    ctx = make_ctx()
    rep = cc_attention_report(ctx, 8, plan8, seed=0)
    assert rep["max_abs_error"] < 2.0 ** -10
    assert rep["explicit_bootstraps"] == 2
    assert rep["bootstrap_placement"] == "phase-boundary interpretation"
    by_name = {p["name"]: p for p in rep["phases"]}
    assert by_name["ccmm_scores"]["levels"] == 3
    assert by_name["ccmm_values"]["levels"] == 3
    assert by_name["softmax"]["levels"] == 8


# ---------------------------------------------------------------- reports

def test_cost_report_totals_are_columnwise_sums():
    phases = [
        {"name": "a", "levels": 2, "ct_rotations": 3, "cc_mults": 1,
         "pc_mults": 4, "rescales": 2, "bootstraps": 0},
        {"name": "b", "levels": 1, "ct_rotations": 2, "cc_mults": 0,
         "pc_mults": 1, "rescales": 1, "bootstraps": 1},
    ]
    rep = cost_report(phases)
    assert rep["total"]["levels"] == 3
    assert rep["total"]["ct_rotations"] == 5
    assert rep["total"]["bootstraps"] == 1
    assert [p["name"] for p in rep["phases"]] == ["a", "b"]


def test_cost_report_empty_is_all_zero():
    rep = cost_report([])
    assert rep["phases"] == []
    assert rep["total"]["levels"] == 0
    assert all(rep["total"][k] == 0 for k in REPORT_KEYS)


# ---------------------------------------------------------------- ffn

def test_ffn_check_errors_are_small():
    ctx = make_ctx(slot_count=4096)
    rep = ffn_check(ctx, width=16, seed=0)
    assert rep["silu_error"] < 1e-3
    assert rep["rmsnorm_error"] < 1e-6


def test_ffn_check_rejects_odd_width():
    ctx = make_ctx(slot_count=4096)
    with pytest.raises(ValueError):
        ffn_check(ctx, width=12)
