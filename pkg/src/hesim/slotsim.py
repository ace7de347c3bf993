"""Slot-level simulator of a leveled approximate-arithmetic FHE scheme.

Ciphertexts are plain float64 slot vectors plus metadata (level, scale
exponent, per-slot noise bound).  No ring arithmetic is performed: the point
is to get level consumption, rotation/multiplication counts and noise
bookkeeping exactly right while keeping the values inspectable.

Two modes:

* exact mode (``noise_bits`` unset): slot values are bit-reproducible and
  carry zero recorded noise;
* noisy mode (``noise_bits = p``): every encode/multiply/bootstrap injects a
  uniform error of magnitude ``2^-p`` times an operation-dependent scale,
  drawn from a seeded generator, and ``noise_est`` tracks the bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class NeedsBootstrapError(RuntimeError):
    """Multiplicative depth is exhausted; the ciphertext needs a bootstrap."""


LEDGER_COUNTERS = (
    "ct_rotations",
    "cc_mults",
    "pc_mults",
    "pt_rotations",
    "pt_mults",
    "rescales",
    "bootstraps",
)


@dataclass
class CostLedger:
    """Operation counters for a run.  These are the performance contract of a
    kernel, so the field names are stable and serialized as-is."""

    ct_rotations: int = 0
    cc_mults: int = 0
    pc_mults: int = 0
    pt_rotations: int = 0
    pt_mults: int = 0
    rescales: int = 0
    bootstraps: int = 0
    min_level_reached: int | None = None

    def observe_level(self, level: int) -> None:
        if self.min_level_reached is None or level < self.min_level_reached:
            self.min_level_reached = level

    def snapshot(self) -> dict:
        return {name: getattr(self, name) for name in LEDGER_COUNTERS}

    def diff(self, earlier: dict) -> dict:
        """Counter deltas since an earlier snapshot()."""
        return {name: getattr(self, name) - earlier[name] for name in LEDGER_COUNTERS}

    def merge(self, other: "CostLedger") -> None:
        for name in LEDGER_COUNTERS:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        if other.min_level_reached is not None:
            self.observe_level(other.min_level_reached)

    def to_dict(self) -> dict:
        out = self.snapshot()
        out["min_level_reached"] = self.min_level_reached
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "CostLedger":
        return cls(**{k: data[k] for k in (*LEDGER_COUNTERS, "min_level_reached") if k in data})


@dataclass(frozen=True)
class SimParams:
    """Scheme parameters.  boot_level defaults to top_level - 4: a bootstrap
    never restores the full modulus it consumed."""

    slot_count: int
    top_level: int = 16
    boot_level: int | None = None
    log_scale: int = 40
    noise_bits: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.slot_count < 1 or self.slot_count & (self.slot_count - 1):
            raise ValueError(f"slot_count must be a power of two, got {self.slot_count}")
        if self.boot_level is None:
            object.__setattr__(self, "boot_level", max(1, self.top_level - 4))
        if not (1 <= self.boot_level <= self.top_level):
            raise ValueError(f"boot_level {self.boot_level} outside [1, {self.top_level}]")
        if self.log_scale <= 0:
            raise ValueError("log_scale must be positive")
        if self.noise_bits is not None and self.noise_bits <= 0:
            raise ValueError("noise_bits must be positive when set")

    def to_dict(self) -> dict:
        return {
            "slot_count": self.slot_count,
            "top_level": self.top_level,
            "boot_level": self.boot_level,
            "log_scale": self.log_scale,
            "noise_bits": self.noise_bits,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimParams":
        known = {k: data[k] for k in ("slot_count", "top_level", "boot_level",
                                      "log_scale", "noise_bits", "seed") if k in data}
        return cls(**known)

    @classmethod
    def from_json(cls, path) -> "SimParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SimPlaintext:
    slots: np.ndarray
    log_scale: int


@dataclass
class SimCiphertext:
    slots: np.ndarray
    level: int
    log_scale: int
    noise_est: np.ndarray  # per-slot absolute error bound


@dataclass(frozen=True)
class BoundsProfile:
    """Per-slot magnitude bounds handed to scaled_bootstrap."""

    bounds: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if not np.all(np.isfinite(b)) or np.any(b <= 0):
            raise ValueError("bounds must be finite and strictly positive")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def uniform(cls, bound: float, slot_count: int) -> "BoundsProfile":
        return cls(np.full(slot_count, float(bound)))


class SlotContext:
    """Owns parameters, the RNG and the cost ledger.

    The context is immutable after construction apart from the ledger (and,
    in noisy mode, the generator state).  All slot operations are methods
    here so every counter increment goes through one place.
    """

    def __init__(self, params: SimParams, seed: int | None = None):
        self.params = params
        self.ledger = CostLedger(min_level_reached=params.top_level)
        if seed is None:
            seed = params.seed
        self._rng = np.random.default_rng(seed)

    # -- basics --------------------------------------------------------

    @property
    def n_slots(self) -> int:
        return self.params.slot_count

    @property
    def noisy(self) -> bool:
        return self.params.noise_bits is not None

    @property
    def noise_base(self) -> float:
        return 2.0 ** -self.params.noise_bits if self.noisy else 0.0

    def fork(self) -> "SlotContext":
        """Child context with a private ledger (merge it back when done).

        Used by parallel kernels: plans and params are shared read-only,
        counters are accumulated per task and merged in task order.
        """
        child = SlotContext.__new__(SlotContext)
        child.params = self.params
        child.ledger = CostLedger(min_level_reached=self.params.top_level)
        child._rng = self._rng.spawn(1)[0]
        return child

    def merge(self, child: "SlotContext") -> None:
        self.ledger.merge(child.ledger)

    def _jitter(self, slots: np.ndarray, mag) -> np.ndarray:
        if not self.noisy:
            return slots
        return slots + self._rng.uniform(-1.0, 1.0, size=slots.shape) * mag

    # -- encode / encrypt ----------------------------------------------

    def encode(self, values, log_scale: int | None = None) -> SimPlaintext:
        """Pack values into all slots, repeating periodically.

        The value length must divide the slot count; scalars broadcast.
        """
        if log_scale is None:
            log_scale = self.params.log_scale
        v = np.atleast_1d(np.asarray(values, dtype=float))
        if self.n_slots % len(v):
            raise ValueError(f"length {len(v)} does not divide slot_count {self.n_slots}")
        slots = np.tile(v, self.n_slots // len(v))
        slots = self._jitter(slots, self.noise_base)
        return SimPlaintext(slots, log_scale)

    def decode(self, pt: SimPlaintext) -> np.ndarray:
        return pt.slots.copy()

    def encrypt(self, pt: SimPlaintext) -> SimCiphertext:
        ct = SimCiphertext(pt.slots.copy(), self.params.top_level, pt.log_scale,
                           np.full(self.n_slots, self.noise_base))
        self.ledger.observe_level(ct.level)
        return ct

    def decrypt(self, ct: SimCiphertext) -> SimPlaintext:
        return SimPlaintext(ct.slots.copy(), ct.log_scale)

    def encrypt_values(self, values) -> SimCiphertext:
        return self.encrypt(self.encode(values))

    def decrypt_values(self, ct: SimCiphertext) -> np.ndarray:
        return ct.slots.copy()

    def trivial_ct(self, values, level: int) -> SimCiphertext:
        """Transparent ciphertext holding public values (no key material in
        this simulator anyway); used for constant results."""
        pt = self.encode(values)
        return SimCiphertext(pt.slots, level, pt.log_scale, np.zeros(self.n_slots))

    # -- additive ops (free) ---------------------------------------------

    def add(self, a: SimCiphertext, b: SimCiphertext) -> SimCiphertext:
        if a.level != b.level:
            raise ValueError(f"add level mismatch: {a.level} != {b.level}")
        if a.log_scale != b.log_scale:
            raise ValueError(f"add scale mismatch: {a.log_scale} != {b.log_scale}")
        return SimCiphertext(a.slots + b.slots, a.level, a.log_scale,
                             a.noise_est + b.noise_est)

    def ct_pt_add(self, ct: SimCiphertext, pt: SimPlaintext, sign: int = 1) -> SimCiphertext:
        if ct.log_scale != pt.log_scale:
            raise ValueError(f"ct+pt scale mismatch: {ct.log_scale} != {pt.log_scale}")
        return SimCiphertext(ct.slots + sign * pt.slots, ct.level, ct.log_scale,
                             ct.noise_est.copy())

    def ct_scale_int(self, ct: SimCiphertext, m: int) -> SimCiphertext:
        # small-integer scaling is repeated addition: no level, no counter
        return SimCiphertext(ct.slots * m, ct.level, ct.log_scale,
                             ct.noise_est * abs(m))

    def div_pow2(self, ct: SimCiphertext, bits: int) -> SimCiphertext:
        """Divide every slot by 2^bits for free.

        Reinterpreting the ciphertext scale as 2^bits larger divides the
        embedded values (noise included) exactly: no key switch, no rescale,
        no level.  The simulator keeps its scale tag fixed and folds the
        reinterpretation into the slots directly.
        """
        if bits < 0:
            raise ValueError("bits must be >= 0")
        f = float(2 ** bits)
        return SimCiphertext(ct.slots / f, ct.level, ct.log_scale,
                             ct.noise_est / f)

    def pt_add(self, a: SimPlaintext, b: SimPlaintext, sign: int = 1) -> SimPlaintext:
        if a.log_scale != b.log_scale:
            raise ValueError("plaintext add scale mismatch")
        return SimPlaintext(a.slots + sign * b.slots, a.log_scale)

    # -- rotations -------------------------------------------------------

    def rotate(self, ct: SimCiphertext, k: int) -> SimCiphertext:
        """Cyclic left rotation: slot i of the result is slot i+k of ct."""
        k %= self.n_slots
        if k == 0:
            return ct
        self.ledger.ct_rotations += 1
        return SimCiphertext(np.roll(ct.slots, -k), ct.level, ct.log_scale,
                             np.roll(ct.noise_est, -k))

    def pt_rotate(self, pt: SimPlaintext, k: int) -> SimPlaintext:
        k %= self.n_slots
        if k == 0:
            return pt
        self.ledger.pt_rotations += 1
        return SimPlaintext(np.roll(pt.slots, -k), pt.log_scale)

    # -- multiplications ---------------------------------------------------

    def _require_depth(self, level: int, need: int = 1) -> None:
        if level < need:
            raise NeedsBootstrapError(f"level {level} cannot absorb {need} more mult(s)")

    def cc_mult(self, a: SimCiphertext, b: SimCiphertext) -> SimCiphertext:
        if a.level != b.level:
            raise ValueError(f"cc_mult level mismatch: {a.level} != {b.level}")
        if a.log_scale != b.log_scale:
            raise ValueError("cc_mult scale mismatch")
        self._require_depth(a.level)
        slots = a.slots * b.slots
        mag = self.noise_base * (np.max(np.abs(slots)) if slots.size else 0.0)
        noise = np.abs(a.slots) * b.noise_est + np.abs(b.slots) * a.noise_est + mag
        self.ledger.cc_mults += 1
        out = SimCiphertext(self._jitter(slots, mag), a.level - 1, a.log_scale, noise)
        self.ledger.observe_level(out.level)
        return out

    def pc_linear(self, terms: Sequence[tuple[SimPlaintext, SimCiphertext]],
                  constant: SimPlaintext | None = None) -> SimCiphertext:
        """Fused plaintext multiply-accumulate: sum(pt_i * ct_i) + constant.

        Products are accumulated at double scale and rescaled once, so the
        whole combination costs one level below the lowest input level and a
        single rescale, however many terms there are.  Mixed input levels are
        allowed (lower ones are reached by modulus switching).
        """
        if not terms:
            raise ValueError("pc_linear needs at least one term")
        lvl = min(ct.level for _, ct in terms)
        self._require_depth(lvl)
        prods = []
        noise = np.zeros(self.n_slots)
        for pt, ct in terms:
            if pt.log_scale != self.params.log_scale:
                raise ValueError("pc term plaintext not at context scale")
            if ct.log_scale != self.params.log_scale:
                raise ValueError("pc term ciphertext not at context scale")
            prod = pt.slots * ct.slots
            mag = self.noise_base * (np.max(np.abs(prod)) if prod.size else 0.0)
            prods.append(self._jitter(prod, mag))
            noise = noise + np.abs(pt.slots) * ct.noise_est + mag
            self.ledger.pc_mults += 1
        # balanced pairwise accumulation so a fused sum over b*g terms
        # associates exactly like per-group sums recombined pairwise
        while len(prods) > 1:
            nxt = [prods[i] + prods[i + 1] for i in range(0, len(prods) - 1, 2)]
            if len(prods) % 2:
                nxt.append(prods[-1])
            prods = nxt
        acc = prods[0]
        if constant is not None:
            if constant.log_scale != self.params.log_scale:
                raise ValueError("pc_linear constant not at context scale")
            acc = acc + constant.slots
        self.ledger.rescales += 1
        out = SimCiphertext(acc, lvl - 1, self.params.log_scale, noise)
        self.ledger.observe_level(out.level)
        return out

    def pc_mult(self, pt: SimPlaintext, ct: SimCiphertext) -> SimCiphertext:
        return self.pc_linear([(pt, ct)])

    def pt_pt_mult_sqrt_scale(self, a: SimPlaintext, b: SimPlaintext) -> SimPlaintext:
        """Plaintext product with operands at half the scale exponent.

        Both inputs sit at log_scale/2 so the product lands exactly at the
        working scale without any rescale; this is how runtime-derived
        plaintexts keep scale parity with the ciphertexts they multiply.
        """
        if self.params.log_scale % 2:
            raise ValueError("square-root encoding needs an even log_scale")
        half = self.params.log_scale // 2
        if a.log_scale != half or b.log_scale != half:
            raise ValueError(f"operands must be at log_scale {half}")
        self.ledger.pt_mults += 1
        return SimPlaintext(a.slots * b.slots, self.params.log_scale)

    # -- level maintenance ---------------------------------------------

    def level_down(self, ct: SimCiphertext, target: int) -> SimCiphertext:
        """Modulus switch to a lower level.  Free: no counter, no noise."""
        if target > ct.level or target < 0:
            raise ValueError(f"cannot switch level {ct.level} -> {target}")
        if target == ct.level:
            return ct
        out = SimCiphertext(ct.slots.copy(), target, ct.log_scale, ct.noise_est.copy())
        self.ledger.observe_level(target)
        return out

    def align(self, a: SimCiphertext, b: SimCiphertext) -> tuple[SimCiphertext, SimCiphertext]:
        lvl = min(a.level, b.level)
        return self.level_down(a, lvl), self.level_down(b, lvl)

    # -- bootstrapping ---------------------------------------------------

    def bootstrap(self, ct: SimCiphertext) -> SimCiphertext:
        """Reset the level to boot_level.

        Accuracy is only guaranteed for slots in [-1, 1]; a slot of magnitude
        x > 1 pays a quadratic precision penalty of 2*log2(x) bits.
        """
        self.ledger.bootstraps += 1
        penalty = np.square(np.maximum(np.abs(ct.slots), 1.0))  # 2*log2|x| bits, as a factor
        # refresh error dominates whatever the ciphertext carried in
        noise = self.noise_base * penalty if self.noisy else ct.noise_est.copy()
        slots = ct.slots + (self._rng.uniform(-1.0, 1.0, ct.slots.shape) * noise
                            if self.noisy else 0.0)
        out = SimCiphertext(slots, self.params.boot_level, ct.log_scale, noise)
        self.ledger.observe_level(out.level)
        return out

    def scaled_bootstrap(self, ct: SimCiphertext, bounds: BoundsProfile) -> SimCiphertext:
        """Bootstrap slots that live outside [-1, 1] by masking them into it.

        Equivalent to pt * bootstrap(ct * pt^-1) with pt holding per-slot
        bounds beta_i.  The two masks use square-root encoding, so the pair
        costs one level on top of the bootstrap itself.  A slot within its
        bound comes back with absolute noise beta_i * 2^-p; a slot at x >
        beta_i additionally pays 2*log2(x/beta_i) bits.
        """
        beta = bounds.bounds
        if beta.shape != ct.slots.shape:
            if beta.size == 1:
                beta = np.full(ct.slots.shape, float(beta))
            else:
                raise ValueError("bounds length does not match slot count")
        self.ledger.bootstraps += 1
        self.ledger.pc_mults += 2
        self.ledger.rescales += 1
        ratio = np.abs(ct.slots) / beta
        penalty = np.square(np.maximum(ratio, 1.0))
        noise = self.noise_base * beta * penalty if self.noisy else ct.noise_est.copy()
        slots = ct.slots + (self._rng.uniform(-1.0, 1.0, ct.slots.shape) * noise
                            if self.noisy else 0.0)
        out = SimCiphertext(slots, self.params.boot_level - 1, ct.log_scale, noise)
        self.ledger.observe_level(out.level)
        return out


def pairwise_sum(ctx: SlotContext, terms: list[SimCiphertext]) -> SimCiphertext:
    """Balanced pairwise reduction.

    Kernels that must agree bit-for-bit (naive vs baby-step/giant-step
    matmul) all reduce through this, since for power-of-two group sizes the
    balanced tree is the same whether or not partial groups were summed
    first.
    """
    if not terms:
        raise ValueError("nothing to sum")
    work = list(terms)
    while len(work) > 1:
        nxt = []
        for i in range(0, len(work) - 1, 2):
            nxt.append(ctx.add(work[i], work[i + 1]))
        if len(work) % 2:
            nxt.append(work[-1])
        work = nxt
    return work[0]
