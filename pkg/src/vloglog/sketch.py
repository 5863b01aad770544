"""Register storage and sketching.

A :class:`RegisterArray` is a plain LogLog/HLL sketch of ``k`` registers.
A :class:`RegisterPool` is the shared array of ``m`` registers from which
every flow reads a virtual array of ``k`` registers through the master hash.
Registers saturate at ``2**register_width - 1``.

The scalar ``update_*`` functions take byte strings; the ``sketch_*``
functions do the same work in bulk for integer trace tokens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

from . import hashing
from .hashing import HashConfig

MAGIC = b"VLLP"
FORMAT_VERSION = 1
# magic, version, m, k, register_width, element_seed, flow_seed
_HEADER = struct.Struct("<4sIQIIQQ")


class IncompatiblePoolError(ValueError):
    """Raised when two pools with different layouts or seeds are combined."""


class SnapshotFormatError(ValueError):
    pass


def _check_width(register_width: int) -> None:
    if not 4 <= register_width <= 8:
        raise ValueError(f"register_width must be in [4, 8], got {register_width}")


def _log2_exact(k: int) -> int:
    if k < 1 or k & (k - 1):
        raise ValueError(f"k must be a power of two, got {k}")
    return k.bit_length() - 1


def _as_bytes(token: bytes | int) -> bytes:
    return token if isinstance(token, bytes) else hashing.token_bytes(token)


@dataclass
class RegisterArray:
    """A single-flow LogLog sketch."""

    k: int
    register_width: int = 5
    registers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        _log2_exact(self.k)
        _check_width(self.register_width)
        if self.registers is None:
            self.registers = np.zeros(self.k, dtype=np.uint8)
        else:
            self.registers = np.asarray(self.registers, dtype=np.uint8)
            if self.registers.shape != (self.k,):
                raise ValueError(f"expected {self.k} registers, got {self.registers.shape}")
            if self.registers.max(initial=0) > self.r_max:
                raise ValueError("register value above r_max")

    @property
    def r_max(self) -> int:
        return (1 << self.register_width) - 1

    def hash_config(self, element_seed: int = 0) -> HashConfig:
        return HashConfig(element_seed=element_seed, prefix_bits=_log2_exact(self.k))

    def copy(self) -> RegisterArray:
        return RegisterArray(self.k, self.register_width, self.registers.copy())

    def histogram(self) -> np.ndarray:
        return np.bincount(self.registers, minlength=self.r_max + 1)


def _check_cfg_k(cfg: HashConfig, k: int) -> None:
    if cfg.k != k:
        raise ValueError(f"hash config selects among {cfg.k} registers, array has {k}")


def update_single(array: RegisterArray, element: bytes | int, cfg: HashConfig) -> RegisterArray:
    """S[j] <- max(S[j], rho(q)) for one element. Mutates and returns ``array``."""
    _check_cfg_k(cfg, array.k)
    j, r = hashing.element_slot(_as_bytes(element), cfg)
    r = min(r, array.r_max)
    if r > array.registers[j]:
        array.registers[j] = r
    return array


def registers_from_hashes(h: np.ndarray, cfg: HashConfig, r_max: int) -> np.ndarray:
    """Register values of a fresh k-register sketch fed the given element hashes.

    rho is decreasing in q, so each register is rho of the smallest suffix
    routed to it; only k values then go through rho.
    """
    k = cfg.k
    suffix = cfg.suffix_bits
    h = np.asarray(h, dtype=np.uint64)
    j = (h >> np.uint64(suffix)).astype(np.int64)
    q = h & np.uint64((1 << suffix) - 1)
    min_q = np.full(k, np.iinfo(np.uint64).max, dtype=np.uint64)
    np.minimum.at(min_q, j, q)
    out = np.zeros(k, dtype=np.uint8)
    hit = np.bincount(j, minlength=k) > 0
    out[hit] = np.minimum(hashing.rho_array(min_q[hit], suffix), r_max)
    return out


def sketch_single(array: RegisterArray, elements, cfg: HashConfig) -> RegisterArray:
    """Bulk :func:`update_single` over integer element tokens."""
    _check_cfg_k(cfg, array.k)
    h = hashing.hash_tokens_array(elements, cfg.element_seed) >> np.uint64(64 - cfg.hash_width)
    np.maximum(array.registers, registers_from_hashes(h, cfg, array.r_max), out=array.registers)
    return array


def sketch_pairs(array: RegisterArray, flows, elements, cfg: HashConfig) -> RegisterArray:
    """Sketch (flow, element) pairs as single elements of one grand flow."""
    _check_cfg_k(cfg, array.k)
    h = hashing.hash_pairs_array(flows, elements, cfg.element_seed) >> np.uint64(64 - cfg.hash_width)
    np.maximum(array.registers, registers_from_hashes(h, cfg, array.r_max), out=array.registers)
    return array


@dataclass
class RegisterPool:
    """The shared physical register array R plus its hashing configuration."""

    m: int
    k: int
    register_width: int = 5
    hash_cfg: HashConfig = None
    registers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        l = _log2_exact(self.k)
        _check_width(self.register_width)
        if self.k > self.m:
            raise ValueError(f"k={self.k} exceeds pool size m={self.m}")
        if self.hash_cfg is None:
            self.hash_cfg = HashConfig(prefix_bits=l)
        elif self.hash_cfg.prefix_bits != l:
            raise ValueError("hash_cfg.prefix_bits must equal log2(k)")
        if self.registers is None:
            self.registers = np.zeros(self.m, dtype=np.uint8)
        else:
            self.registers = np.asarray(self.registers, dtype=np.uint8)
            if self.registers.shape != (self.m,):
                raise ValueError(f"expected {self.m} registers, got {self.registers.shape}")
            if self.registers.max(initial=0) > self.r_max:
                raise ValueError("register value above r_max")

    @classmethod
    def empty(cls, m: int, k: int, register_width: int = 5,
              element_seed: int = 0, flow_seed: int = 1) -> RegisterPool:
        cfg = HashConfig(element_seed=element_seed, flow_seed=flow_seed,
                         prefix_bits=_log2_exact(k))
        return cls(m, k, register_width, cfg)

    @property
    def r_max(self) -> int:
        return (1 << self.register_width) - 1

    def copy(self) -> RegisterPool:
        return RegisterPool(self.m, self.k, self.register_width, self.hash_cfg,
                            self.registers.copy())

    def layout(self) -> tuple:
        return (self.m, self.k, self.register_width, self.hash_cfg)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegisterPool):
            return NotImplemented
        return self.layout() == other.layout() and np.array_equal(self.registers, other.registers)


@dataclass(frozen=True)
class VirtualView:
    """The k values a flow reads out of the pool, with their pool indices."""

    flow_id: bytes
    values: np.ndarray
    indices: np.ndarray

    def histogram(self, r_max: int) -> np.ndarray:
        return np.bincount(self.values, minlength=r_max + 1)


def update_virtual(pool: RegisterPool, flow_id: bytes | int, element: bytes | int) -> RegisterPool:
    """R[G(f|j)] <- max(R[G(f|j)], rho(q)). Mutates and returns ``pool``."""
    cfg = pool.hash_cfg
    j, r = hashing.element_slot(_as_bytes(element), cfg)
    idx = hashing.derive_register_index(_as_bytes(flow_id), j, pool.m, cfg)
    r = min(r, pool.r_max)
    if r > pool.registers[idx]:
        pool.registers[idx] = r
    return pool


def sketch_packets(pool: RegisterPool, flows, elements, chunk: int = 1 << 20) -> RegisterPool:
    """Bulk :func:`update_virtual` over integer (flow, element) token arrays."""
    flows = np.asarray(flows, dtype=np.uint64)
    elements = np.asarray(elements, dtype=np.uint64)
    if flows.shape != elements.shape:
        raise ValueError("flows and elements must have the same length")
    cfg = pool.hash_cfg
    for lo in range(0, flows.size, chunk):
        f = flows[lo : lo + chunk]
        j, r = hashing.element_slots_array(elements[lo : lo + chunk], cfg)
        idx = hashing.register_indices_array(f, j, pool.m, cfg)
        np.maximum.at(pool.registers, idx, np.minimum(r, pool.r_max).astype(np.uint8))
    return pool


def sketch_stream(pool: RegisterPool, packets: Iterable[tuple[int, int]],
                  batch: int = 1 << 18) -> RegisterPool:
    """Sketch an iterable of integer (flow, element) pairs in batches."""
    buf_f: list[int] = []
    buf_x: list[int] = []
    for f, x in packets:
        buf_f.append(f)
        buf_x.append(x)
        if len(buf_f) >= batch:
            sketch_packets(pool, buf_f, buf_x)
            buf_f.clear()
            buf_x.clear()
    if buf_f:
        sketch_packets(pool, buf_f, buf_x)
    return pool


def view_indices(pool: RegisterPool, flow_id: bytes | int) -> np.ndarray:
    if isinstance(flow_id, bytes):
        return np.array([hashing.derive_register_index(flow_id, i, pool.m, pool.hash_cfg)
                         for i in range(pool.k)], dtype=np.int64)
    return hashing.register_indices_array(np.uint64(flow_id), np.arange(pool.k), pool.m, pool.hash_cfg)


def virtual_view(pool: RegisterPool, flow_id: bytes | int) -> VirtualView:
    """R_f[i] = R[G_i(f)] for i in 0..k-1."""
    indices = view_indices(pool, flow_id)
    values = pool.registers[indices].copy()
    return VirtualView(_as_bytes(flow_id), values, indices)


def flow_histograms(pool: RegisterPool, flows, chunk: int = 2048) -> np.ndarray:
    """Histogram of each flow's virtual register values.

    Returns an ``(len(flows), r_max + 1)`` array; row ``f`` counts how many
    of the flow's k registers hold each value. Both estimator families only
    need these counts, so the views themselves are never kept.
    """
    flows = np.asarray(flows, dtype=np.uint64)
    nbins = pool.r_max + 1
    out = np.empty((flows.size, nbins), dtype=np.int32)
    sub = np.arange(pool.k, dtype=np.uint64)[None, :]
    for lo in range(0, flows.size, chunk):
        f = flows[lo : lo + chunk]
        idx = hashing.register_indices_array(f[:, None], sub, pool.m, pool.hash_cfg)
        vals = pool.registers[idx].astype(np.int64)
        vals += (np.arange(f.size, dtype=np.int64) * nbins)[:, None]
        out[lo : lo + f.size] = np.bincount(vals.ravel(), minlength=f.size * nbins).reshape(f.size, nbins)
    return out


def expected_collisions(k: int, m: int) -> float:
    """Approximate number of a flow's k virtual registers that share a pool register."""
    if k > m:
        raise ValueError(f"k={k} exceeds m={m}")
    return k * k / m


def collision_count(indices: np.ndarray) -> int:
    """Virtual registers whose pool index also appears at another position."""
    _, counts = np.unique(indices, return_counts=True)
    return int(counts[counts > 1].sum())


def merge(pool_a: RegisterPool, pool_b: RegisterPool) -> RegisterPool:
    """Register-wise max of two pools sharing one configuration."""
    if pool_a.layout() != pool_b.layout():
        raise IncompatiblePoolError(
            f"cannot merge pools with layouts {pool_a.layout()} and {pool_b.layout()}"
        )
    return RegisterPool(pool_a.m, pool_a.k, pool_a.register_width, pool_a.hash_cfg,
                        np.maximum(pool_a.registers, pool_b.registers))


# ---------------------------------------------------------------------------
# snapshot files


def pack_registers(values: np.ndarray, width: int) -> bytes:
    """Pack values ``width`` bits each, least significant bit first."""
    values = np.asarray(values, dtype=np.uint8)
    bits = (values[:, None] >> np.arange(width, dtype=np.uint8)) & 1
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_registers(data: bytes, count: int, width: int) -> np.ndarray:
    nbytes = (count * width + 7) // 8
    if len(data) != nbytes:
        raise SnapshotFormatError(f"expected {nbytes} register bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bits = bits[: count * width].reshape(count, width)
    return (bits << np.arange(width, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


def dump_pool(pool: RegisterPool, fh: BinaryIO) -> None:
    cfg = pool.hash_cfg
    fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, pool.m, pool.k, pool.register_width,
                          cfg.element_seed, cfg.flow_seed))
    fh.write(pack_registers(pool.registers, pool.register_width))


def load_pool(fh: BinaryIO) -> RegisterPool:
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise SnapshotFormatError("truncated snapshot header")
    magic, version, m, k, width, eseed, fseed = _HEADER.unpack(header)
    if magic != MAGIC:
        raise SnapshotFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    registers = unpack_registers(fh.read(), m, width)
    cfg = HashConfig(element_seed=eseed, flow_seed=fseed, prefix_bits=_log2_exact(k))
    return RegisterPool(m, k, width, cfg, registers)


def save_pool(pool: RegisterPool, path) -> None:
    with open(path, "wb") as fh:
        dump_pool(pool, fh)


def read_pool(path) -> RegisterPool:
    with open(path, "rb") as fh:
        return load_pool(fh)
