"""Leveled-FHE slot simulator and homomorphic kernel library."""

from .slotsim import (BoundsProfile, CostLedger, NeedsBootstrapError,
                      SimCiphertext, SimParams, SimPlaintext, SlotContext,
                      pairwise_sum)
from .packing import (PackedMatrix, col_shear, encrypt_matrix, pack_matrix,
                      pack_sheared, unpack_matrix)
from .matmul import (ccmm_baseline, clear_ccmm_identity, clear_pcmm,
                     make_pcmm_plan, pcmm_bsgs, pcmm_depth1)
from .polyapprox import ApproxPoly, RangeTable, chebyshev_fit, ps_eval_ct
from .sospoly import SosTree, build_tree, search_stable, slim_eval, split_sos
from .softmax import (SoftmaxPlan, TrackReport, calibrate_softmax,
                      softmax_clear, softmax_encrypted, softmax_on_tau_packed,
                      strided_norm_sq)
from .bitrev import bit_reverse, byte_mix, half_reverse, shuffle_matrix
from .pipeline import (KvCache, PrefillSplit, ToyModelConfig, attention_demo,
                       cc_attention_report, chunked_prefill, cost_report,
                       decode_step, ffn_check, full_prefill,
                       pc_attention_encrypted, rope_packed)

__all__ = [
    "BoundsProfile", "CostLedger", "NeedsBootstrapError", "SimCiphertext",
    "SimParams", "SimPlaintext", "SlotContext", "pairwise_sum",
    "PackedMatrix", "col_shear", "encrypt_matrix", "pack_matrix",
    "pack_sheared", "unpack_matrix",
    "ccmm_baseline", "clear_ccmm_identity", "clear_pcmm",
    "make_pcmm_plan", "pcmm_bsgs", "pcmm_depth1",
    "ApproxPoly", "RangeTable", "chebyshev_fit", "ps_eval_ct",
    "SosTree", "build_tree", "search_stable", "slim_eval", "split_sos",
    "SoftmaxPlan", "TrackReport", "calibrate_softmax", "softmax_clear",
    "softmax_encrypted", "softmax_on_tau_packed", "strided_norm_sq",
    "bit_reverse", "byte_mix", "half_reverse", "shuffle_matrix",
    "KvCache", "PrefillSplit", "ToyModelConfig", "attention_demo",
    "cc_attention_report", "chunked_prefill", "cost_report", "decode_step",
    "ffn_check", "full_prefill", "pc_attention_encrypted", "rope_packed",
]

__version__ = "0.1.0"
