"""Seeded 64-bit hashing and leading-zero statistics.

Everything in the package hashes through MurmurHash64A. The scalar
functions work on ``bytes`` and are the reference; the ``*_array``
variants compute the same values over numpy ``uint64`` arrays for the
fixed-length encodings used by integer trace tokens:

* an element token is its 8-byte little-endian encoding,
* ``G(f|i)`` hashes the 8-byte flow token followed by ``i`` as 4 bytes
  big-endian,
* a grand-flow pair ``f|x`` is the two 8-byte tokens back to back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_M = 0xC6A4A7935BD1E995
_R = 47

_M_U64 = np.uint64(_M)
_R_U64 = np.uint64(_R)


@dataclass(frozen=True)
class HashConfig:
    """Seeds and bit layout shared by every hashing operation.

    ``element_seed`` seeds the element hash H, ``flow_seed`` seeds the
    master hash G used to pick pool registers, and ``prefix_bits`` is
    ``log2(k)``, the number of leading hash bits that select a register.
    """

    element_seed: int = 0
    flow_seed: int = 1
    hash_width: int = 64
    prefix_bits: int = 9

    def __post_init__(self) -> None:
        if not 1 <= self.hash_width <= 64:
            raise ValueError(f"hash_width must be in [1, 64], got {self.hash_width}")
        if not 0 <= self.prefix_bits < self.hash_width:
            raise ValueError(
                f"prefix_bits must be in [0, hash_width), got {self.prefix_bits}"
            )
        for name in ("element_seed", "flow_seed"):
            seed = getattr(self, name)
            if not 0 <= seed <= _MASK64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {seed}")

    @property
    def k(self) -> int:
        return 1 << self.prefix_bits

    @property
    def suffix_bits(self) -> int:
        return self.hash_width - self.prefix_bits


# ---------------------------------------------------------------------------
# scalar reference


def murmur64a(data: bytes, seed: int = 0) -> int:
    """MurmurHash64A of ``data`` as an unsigned 64-bit integer."""
    length = len(data)
    h = (seed ^ (length * _M)) & _MASK64
    nblocks = length // 8
    for b in range(nblocks):
        k = int.from_bytes(data[8 * b : 8 * b + 8], "little")
        k = (k * _M) & _MASK64
        k ^= k >> _R
        k = (k * _M) & _MASK64
        h ^= k
        h = (h * _M) & _MASK64
    tail = data[8 * nblocks :]
    if tail:
        h ^= int.from_bytes(tail, "little")
        h = (h * _M) & _MASK64
    h ^= h >> _R
    h = (h * _M) & _MASK64
    h ^= h >> _R
    return h


def rho(bits: int, width: int) -> int:
    """1-based position of the leftmost 1-bit of a ``width``-bit string.

    An all-zero string gives ``width + 1``.
    """
    if width < 1:
        raise ValueError("rho needs a bit string of width >= 1")
    if bits < 0 or bits >> width:
        raise ValueError(f"value {bits} does not fit in {width} bits")
    return width - bits.bit_length() + 1


def split_hash(bits: int, width: int, l: int) -> tuple[int, int]:
    """Split into the ``l``-bit prefix ``j`` and the ``width - l``-bit suffix ``q``."""
    if not 0 <= l < width:
        raise ValueError(f"prefix length {l} must be in [0, {width})")
    suffix = width - l
    return bits >> suffix, bits & ((1 << suffix) - 1)


def token_bytes(token: int) -> bytes:
    """Byte encoding of an integer trace token (8 bytes, little-endian)."""
    return int(token).to_bytes(8, "little")


def hash_element(element: bytes, cfg: HashConfig) -> int:
    """H(element): a ``cfg.hash_width``-bit string as an int."""
    return murmur64a(element, cfg.element_seed) >> (64 - cfg.hash_width)


def derive_register_index(flow_id: bytes, i: int, m: int, cfg: HashConfig) -> int:
    """G_i(flow_id) = G(flow_id | i) mod m."""
    if m < 1:
        raise ValueError("pool size m must be >= 1")
    if not 0 <= i < 1 << 32:
        raise ValueError(f"sub-register index {i} out of range")
    return murmur64a(flow_id + i.to_bytes(4, "big"), cfg.flow_seed) % m


def element_slot(element: bytes, cfg: HashConfig) -> tuple[int, int]:
    """Register selector ``j`` and leading-zero statistic ``rho(q)`` for one element."""
    j, q = split_hash(hash_element(element, cfg), cfg.hash_width, cfg.prefix_bits)
    return j, rho(q, cfg.suffix_bits)


# ---------------------------------------------------------------------------
# vectorized twins over integer tokens


def _mix_block(h: np.ndarray, k: np.ndarray) -> np.ndarray:
    k = k * _M_U64
    k ^= k >> _R_U64
    k *= _M_U64
    h ^= k
    h *= _M_U64
    return h


def _finalize(h: np.ndarray) -> np.ndarray:
    h ^= h >> _R_U64
    h *= _M_U64
    h ^= h >> _R_U64
    return h


def _murmur_words(words: list[np.ndarray], tail: np.ndarray | None, length: int, seed: int) -> np.ndarray:
    shape = np.broadcast_shapes(*(w.shape for w in words), *(() if tail is None else (tail.shape,)))
    h0 = (seed ^ (length * _M)) & _MASK64
    h = np.full(shape, h0, dtype=np.uint64)
    for w in words:
        h = _mix_block(h, w)
    if tail is not None:
        h ^= tail
        h *= _M_U64
    return _finalize(h)


def _as_u64(a) -> np.ndarray:
    return np.asarray(a).astype(np.uint64, copy=False)


def _bswap32(i: np.ndarray) -> np.ndarray:
    i = i & np.uint64(0xFFFFFFFF)
    return (
        ((i & np.uint64(0xFF)) << np.uint64(24))
        | (((i >> np.uint64(8)) & np.uint64(0xFF)) << np.uint64(16))
        | (((i >> np.uint64(16)) & np.uint64(0xFF)) << np.uint64(8))
        | (i >> np.uint64(24))
    )


def hash_tokens_array(tokens, seed: int) -> np.ndarray:
    """murmur64a(token_bytes(t), seed) for every token."""
    with np.errstate(over="ignore"):
        return _murmur_words([_as_u64(tokens)], None, 8, seed)


def hash_pairs_array(flows, elements, seed: int) -> np.ndarray:
    """murmur64a(token_bytes(f) + token_bytes(x), seed), broadcasting."""
    with np.errstate(over="ignore"):
        return _murmur_words([_as_u64(flows), _as_u64(elements)], None, 16, seed)


def register_indices_array(flows, i, m: int, cfg: HashConfig) -> np.ndarray:
    """G(f | i) mod m for integer flow tokens, broadcasting ``flows`` against ``i``."""
    if m < 1:
        raise ValueError("pool size m must be >= 1")
    with np.errstate(over="ignore"):
        h = _murmur_words([_as_u64(flows)], _bswap32(_as_u64(i)), 12, cfg.flow_seed)
    return (h % np.uint64(m)).astype(np.int64)


def _bit_length(x: np.ndarray) -> np.ndarray:
    # frexp is exact below 2**53, so split into 32-bit halves
    hi = (x >> np.uint64(32)).astype(np.float64)
    lo = (x & np.uint64(0xFFFFFFFF)).astype(np.float64)
    bl_hi = np.frexp(hi)[1]
    bl_lo = np.frexp(lo)[1]
    return np.where(hi > 0, 32 + bl_hi, bl_lo).astype(np.int64)


def rho_array(bits: np.ndarray, width: int) -> np.ndarray:
    """Vectorized :func:`rho` over ``uint64`` values of ``width`` bits."""
    if width < 1:
        raise ValueError("rho needs a bit string of width >= 1")
    return width - _bit_length(_as_u64(bits)) + 1


def element_slots_array(tokens, cfg: HashConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`element_slot` for integer element tokens."""
    h = hash_tokens_array(tokens, cfg.element_seed) >> np.uint64(64 - cfg.hash_width)
    return split_slots(h, cfg)


def split_slots(h: np.ndarray, cfg: HashConfig) -> tuple[np.ndarray, np.ndarray]:
    suffix = cfg.suffix_bits
    j = (h >> np.uint64(suffix)).astype(np.int64)
    q = h & np.uint64((1 << suffix) - 1)
    return j, rho_array(q, suffix)
