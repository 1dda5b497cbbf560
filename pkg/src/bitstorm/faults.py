"""Fault models and deterministic random selection of sites, elements, bits.

Random streams come from Philox4x64-10, a counter-based generator with
platform-independent output.  Stream keying is collision-free by
construction: the 256-bit counter is laid out as

    (block_index, trial, sample, site)

with the 64-bit master seed as the key, so distinct (trial, sample, site)
tuples own disjoint counter ranges for any realistic number of draws.

Draw discipline per `maybe_inject` call (fixed, outcome-independent):

    word 0 -> Bernoulli uniform        (inject or not)
    word 1 -> flat element index       (modulo the element count)
    word 2 -> fault material           (bit index or replacement pattern)

All three words are consumed on every call, so per-call draw counts are
constant and later records never depend on earlier Bernoulli outcomes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .microops import INJECTABLE_KINDS

RNG_ALGORITHM = "philox4x64-10"

FAULT_KINDS = ("zero", "random_value", "bit_flip_random", "bit_flip_specific")

#: Bit column value for faults that do not flip a bit (zero, random_value).
NO_BIT = -1

RECORD_DTYPE = np.dtype(
    [
        ("trial", "<u8"),
        ("sample", "<u8"),
        ("site", "<u8"),
        ("element", "<u8"),
        ("bit", "<i4"),
        ("original", "<u4"),
        ("corrupted", "<u4"),
    ]
)


# ---------------------------------------------------------------------------
# Philox4x64-10
# ---------------------------------------------------------------------------

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

#: Second key word; the first is the user's master seed.
KEY_SALT = np.uint64(0x42495453544F524D)


def _mulhilo(a: np.uint64, b: np.ndarray):
    """64x64 -> 128 bit multiply via 32-bit limbs; returns (hi, lo)."""
    lo = a * b  # wraps mod 2**64
    al = a & _MASK32
    ah = a >> _SHIFT32
    bl = b & _MASK32
    bh = b >> _SHIFT32
    t = al * bh + ((al * bl) >> _SHIFT32)
    t2 = ah * bl + (t & _MASK32)
    hi = ah * bh + (t >> _SHIFT32) + (t2 >> _SHIFT32)
    return hi, lo


def philox_block(counters: np.ndarray, key0: np.uint64, key1: np.uint64) -> np.ndarray:
    """Run Philox4x64-10 on an (n, 4) array of counters; returns (n, 4) words."""
    counters = np.ascontiguousarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x0 = counters[:, 0].copy()
        x1 = counters[:, 1].copy()
        x2 = counters[:, 2].copy()
        x3 = counters[:, 3].copy()
        k0 = np.uint64(key0)
        k1 = np.uint64(key1)
        for r in range(10):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, x0)
            hi1, lo1 = _mulhilo(_M1, x2)
            x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
    return np.stack([x0, x1, x2, x3], axis=1)


def _as_u64(value: int, what: str) -> int:
    value = int(value)
    if not 0 <= value < 2**64:
        raise ValidationError(f"{what} must fit in an unsigned 64-bit integer, got {value}")
    return value


class PhiloxStream:
    """A buffered, value-like stream of 64-bit words for one (trial, sample, site).

    Not thread-safe; each stream is confined to one trial worker.
    """

    __slots__ = ("seed", "trial", "sample", "site", "_next_block", "_buffer", "_pos", "_chunk")

    def __init__(self, seed: int, trial: int, sample: int, site: int):
        self.seed = _as_u64(seed, "seed")
        self.trial = _as_u64(trial, "trial")
        self.sample = _as_u64(sample, "sample")
        self.site = _as_u64(site, "site")
        self._next_block = 0
        self._buffer = np.empty(0, dtype=np.uint64)
        self._pos = 0
        self._chunk = 8

    def _refill(self):
        n = self._chunk
        self._chunk = min(self._chunk * 2, 1 << 14)
        counters = np.empty((n, 4), dtype=np.uint64)
        counters[:, 0] = np.arange(self._next_block, self._next_block + n, dtype=np.uint64)
        counters[:, 1] = self.trial
        counters[:, 2] = self.sample
        counters[:, 3] = self.site
        self._next_block += n
        self._buffer = philox_block(counters, np.uint64(self.seed), KEY_SALT).reshape(-1)
        self._pos = 0

    def next_u64(self) -> int:
        if self._pos >= self._buffer.size:
            self._refill()
        word = int(self._buffer[self._pos])
        self._pos += 1
        return word

    def uniform(self) -> float:
        """Uniform float64 in [0, 1) from the top 53 bits of one word."""
        return (self.next_u64() >> 11) * 2.0**-53

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by 64-bit modulo (bias < n * 2**-64)."""
        return self.next_u64() % n


def derive_stream(seed: int, trial: int, sample: int, site: int) -> PhiloxStream:
    """Deterministic stream for one (seed, trial, sample, site) tuple."""
    return PhiloxStream(seed, trial, sample, site)


# ---------------------------------------------------------------------------
# Fault specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultSpec:
    """What to corrupt, how, with what probability, under which seed."""

    mode: str  # "op" (operation-wise) or "layer" (layer-wise)
    target: object  # tuple of micro-op kinds for "op", layer index for "layer"
    fault: str  # one of FAULT_KINDS
    probability: float
    seed: int
    bit: int | None = None  # required iff fault == "bit_flip_specific"

    def __post_init__(self):
        if self.mode not in ("op", "layer"):
            raise ValidationError(f"mode must be 'op' or 'layer', got {self.mode!r}")
        if self.fault not in FAULT_KINDS:
            raise ValidationError(f"unknown fault kind {self.fault!r}; expected one of {FAULT_KINDS}")
        if self.fault == "bit_flip_specific":
            if self.bit is None or not 0 <= int(self.bit) <= 31:
                raise ValidationError("bit_flip_specific requires a bit index in 0..31")
        elif self.bit is not None:
            raise ValidationError(f"fault kind {self.fault!r} does not take a bit index")
        if not 0.0 <= float(self.probability) <= 1.0:
            raise ValidationError(f"probability must be in [0, 1], got {self.probability}")
        _as_u64(self.seed, "seed")
        if self.mode == "op":
            kinds = tuple(self.target)
            if not kinds:
                raise ValidationError("operation-wise target must name at least one op kind")
            unknown = sorted(set(kinds) - set(INJECTABLE_KINDS))
            if unknown:
                raise ValidationError(f"unknown op kinds {unknown}; expected among {list(INJECTABLE_KINDS)}")
            object.__setattr__(self, "target", kinds)
        else:
            if int(self.target) < 0:
                raise ValidationError(f"layer index must be non-negative, got {self.target}")
            object.__setattr__(self, "target", int(self.target))

    def digest(self) -> str:
        doc = {
            "mode": self.mode,
            "target": list(self.target) if self.mode == "op" else self.target,
            "fault": self.fault,
            "bit": self.bit,
            "probability": self.probability,
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class InjectionRecord:
    trial: int
    sample: int
    site: int
    element: int
    bit: int  # NO_BIT for zero / random_value faults
    original: int  # u32 bit pattern before corruption
    corrupted: int  # u32 bit pattern after corruption

    def csv_row(self) -> str:
        return (
            f"{self.trial},{self.sample},{self.site},{self.element},"
            f"{self.bit},{self.original:08x},{self.corrupted:08x}"
        )


RECORD_CSV_HEADER = "trial,sample,site,element,bit,original_hex,corrupted_hex"


# ---------------------------------------------------------------------------
# Fault application
# ---------------------------------------------------------------------------


def flip_bit(value, bit):
    """Flip one bit of a binary32 value (or elementwise over arrays).

    Involution: flip_bit(flip_bit(v, k), k) is bit-identical to v.
    """
    bits = np.atleast_1d(np.asarray(bit))
    if bits.min() < 0 or bits.max() > 31:
        raise ValidationError(f"bit index must be in 0..31, got {bit}")
    arr = np.atleast_1d(np.asarray(value, dtype=np.float32))
    flipped = (arr.view(np.uint32) ^ (np.uint32(1) << bits.astype(np.uint32))).view(np.float32)
    if np.ndim(value) == 0 and np.ndim(bit) == 0:
        return np.float32(flipped[0])
    return flipped


def _corrupted_bits(original: int, fault: str, material: int, specific_bit: int | None):
    """New u32 pattern and the bit column for one corruption."""
    if fault == "zero":
        return 0, NO_BIT
    if fault == "random_value":
        return material & 0xFFFFFFFF, NO_BIT
    if fault == "bit_flip_random":
        bit = material % 32
        return original ^ (1 << bit), bit
    bit = int(specific_bit)
    return original ^ (1 << bit), bit


def corrupt_element(tensor: np.ndarray, index: int, kind: str, stream: PhiloxStream, specific_bit: int | None = None):
    """Corrupt one flat element of a copy of `tensor`.

    Always consumes exactly one word of fault material from the stream,
    whether or not the fault kind uses it.  Zero applied to a zero element
    and random_value drawing the original pattern are recorded as
    no-change (original == corrupted).
    """
    tensor = np.asarray(tensor, dtype=np.float32)
    index = int(index)
    if not 0 <= index < tensor.size:
        raise ValidationError(f"element index {index} out of range for {tensor.size} elements")
    material = stream.next_u64()
    out = tensor.copy()
    flat = out.reshape(-1).view(np.uint32)
    original = int(flat[index])
    corrupted, bit = _corrupted_bits(original, kind, material, specific_bit)
    flat[index] = np.uint32(corrupted)
    record = InjectionRecord(
        trial=stream.trial,
        sample=stream.sample,
        site=stream.site,
        element=index,
        bit=bit,
        original=original,
        corrupted=corrupted,
    )
    return out, record


def maybe_inject(tensor: np.ndarray, spec: FaultSpec, stream: PhiloxStream):
    """One Bernoulli draw, then at most one corrupted element.

    Returns the (possibly replaced) tensor and the list of injection
    records.  The stream advances by exactly three words regardless of the
    outcome; with probability 0 the input tensor is returned bit-identical.
    """
    u = stream.uniform()
    element = stream.below(np.asarray(tensor).size)
    if u < spec.probability:
        out, record = corrupt_element(tensor, element, spec.fault, stream, spec.bit)
        return out, [record]
    stream.next_u64()  # keep per-call draw counts constant
    return tensor, []


def inject_batch(acts: np.ndarray, spec: FaultSpec, trial: int, sample_ids: np.ndarray, site: int):
    """Vectorized maybe_inject over a batch of per-sample tensors.

    `acts` has shape (samples, *tensor shape).  Bit-for-bit equivalent to
    calling maybe_inject with derive_stream(spec.seed, trial, sample, site)
    per sample, which the test suite pins.  Returns (acts, records); the
    input array is left untouched and copied only when a fault fires.
    """
    n_samples = acts.shape[0]
    n_elements = int(np.prod(acts.shape[1:]))
    sample_ids = np.asarray(sample_ids, dtype=np.uint64)
    counters = np.zeros((n_samples, 4), dtype=np.uint64)
    counters[:, 1] = np.uint64(_as_u64(trial, "trial"))
    counters[:, 2] = sample_ids
    counters[:, 3] = np.uint64(_as_u64(site, "site"))
    words = philox_block(counters, np.uint64(spec.seed), KEY_SALT)

    u = (words[:, 0] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    hit = u < spec.probability
    if not hit.any():
        return acts, np.empty(0, dtype=RECORD_DTYPE)

    rows = np.nonzero(hit)[0]
    elements = (words[rows, 1] % np.uint64(n_elements)).astype(np.int64)
    material = words[rows, 2]

    out = acts.copy()
    flat = out.reshape(n_samples, n_elements).view(np.uint32)
    original = flat[rows, elements].astype(np.uint32)
    if spec.fault == "zero":
        corrupted = np.zeros_like(original)
        bits = np.full(rows.size, NO_BIT, dtype=np.int32)
    elif spec.fault == "random_value":
        corrupted = (material & np.uint64(0xFFFFFFFF)).astype(np.uint32)
        bits = np.full(rows.size, NO_BIT, dtype=np.int32)
    elif spec.fault == "bit_flip_random":
        bits = (material % np.uint64(32)).astype(np.int32)
        corrupted = original ^ (np.uint32(1) << bits.astype(np.uint32))
    else:  # bit_flip_specific
        bits = np.full(rows.size, spec.bit, dtype=np.int32)
        corrupted = original ^ np.uint32(1 << spec.bit)
    flat[rows, elements] = corrupted

    records = np.empty(rows.size, dtype=RECORD_DTYPE)
    records["trial"] = trial
    records["sample"] = sample_ids[rows]
    records["site"] = site
    records["element"] = elements.astype(np.uint64)
    records["bit"] = bits
    records["original"] = original
    records["corrupted"] = corrupted
    return out, records


def records_to_rows(records: np.ndarray):
    """Format a structured record array as injector CSV rows."""
    for rec in records:
        yield (
            f"{int(rec['trial'])},{int(rec['sample'])},{int(rec['site'])},"
            f"{int(rec['element'])},{int(rec['bit'])},"
            f"{int(rec['original']):08x},{int(rec['corrupted']):08x}"
        )
