"""Zipf flow-size model, synthetic traces and ground truth.

Trace files are plain text, one packet per line::

    # vloglog-trace seed=1 pi=2.25 card_max=100000 flows=1000000
    <flow_id>\\t<element_id>

Tokens are unsigned decimal integers below 2**64. Lines starting with ``#``
and blank lines are ignored. Every packet line must end with a newline, so
a file cut off mid-write is reported instead of silently yielding a short
last token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

import numpy as np

# element_id = (flow index << ELEMENT_SHIFT) | j keeps elements unique across flows
ELEMENT_SHIFT = 32
_U64_MAX = (1 << 64) - 1


class TraceParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class ZipfModel:
    """Zipf(pi, n_max): P(N = n) = n**-pi / C on 1..n_max."""

    pi: float
    n_max: int
    normalizer: float = field(init=False)
    _cdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.pi > 0:
            raise ValueError(f"Zipf shape must be positive, got {self.pi}")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        weights = np.arange(1, self.n_max + 1, dtype=np.float64) ** -self.pi
        c = math.fsum(weights)
        cdf = np.cumsum(weights) / c
        cdf[-1] = 1.0
        object.__setattr__(self, "normalizer", c)
        object.__setattr__(self, "_cdf", cdf)

    def mean(self) -> float:
        n = np.arange(1, self.n_max + 1, dtype=np.float64)
        return math.fsum(n ** (1.0 - self.pi)) / self.normalizer


def zipf_pmf(model: ZipfModel, n: int) -> float:
    if not 1 <= n <= model.n_max:
        raise ValueError(f"cardinality {n} outside [1, {model.n_max}]")
    return n ** -model.pi / model.normalizer


def sample_cardinalities(model: ZipfModel, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws via binary search on the cumulative table."""
    u = rng.random(size)
    idx = np.searchsorted(model._cdf, u, side="right")
    return np.minimum(idx, model.n_max - 1).astype(np.int64) + 1


def sample_cardinality(model: ZipfModel, rng: np.random.Generator) -> int:
    return int(sample_cardinalities(model, 1, rng)[0])


@dataclass
class Trace:
    """Packets in stream order plus the generating parameters, if known."""

    flows: np.ndarray
    elements: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.flows.size)

    def packets(self) -> Iterator[tuple[int, int]]:
        return zip(self.flows.tolist(), self.elements.tolist())

    def flow_ids(self) -> np.ndarray:
        return np.unique(self.flows)


def generate_trace(num_flows: int, model: ZipfModel, seed: int) -> Trace:
    """Flows 0..num_flows-1 with Zipf cardinalities and distinct elements each.

    Packets are emitted once per element, in a seeded global shuffle.
    """
    if num_flows < 1:
        raise ValueError("num_flows must be >= 1")
    if model.n_max >= 1 << ELEMENT_SHIFT or num_flows >= 1 << (64 - ELEMENT_SHIFT):
        raise ValueError("trace too large for the element-id layout")
    rng = np.random.default_rng(seed)
    cards = sample_cardinalities(model, num_flows, rng)
    flows = np.repeat(np.arange(num_flows, dtype=np.uint64), cards)
    starts = np.cumsum(cards) - cards
    offsets = np.arange(flows.size, dtype=np.int64) - np.repeat(starts, cards)
    elements = (flows << np.uint64(ELEMENT_SHIFT)) | offsets.astype(np.uint64)
    order = rng.permutation(flows.size)
    meta = {"seed": seed, "pi": model.pi, "card_max": model.n_max, "flows": num_flows}
    trace = Trace(flows[order], elements[order], meta)
    trace.meta["cardinalities"] = cards
    return trace


def _header(meta: dict) -> str:
    keys = ("seed", "pi", "card_max", "flows")
    return "# vloglog-trace " + " ".join(f"{key}={meta[key]}" for key in keys if key in meta)


def write_trace(trace: Trace, fh: TextIO, chunk: int = 1 << 18) -> None:
    if trace.meta:
        fh.write(_header(trace.meta) + "\n")
    for lo in range(0, len(trace), chunk):
        f = trace.flows[lo : lo + chunk].tolist()
        x = trace.elements[lo : lo + chunk].tolist()
        fh.write("".join(f"{a}\t{b}\n" for a, b in zip(f, x)))


def save_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        write_trace(trace, fh)


def _token(text: str, lineno: int) -> int:
    if not text.isdigit() or not text.isascii():
        raise TraceParseError(lineno, f"expected an unsigned decimal token, got {text!r}")
    value = int(text)
    if value > _U64_MAX:
        raise TraceParseError(lineno, f"token {text} does not fit in 64 bits")
    return value


def parse_trace(fh: Iterable[str]) -> Iterator[tuple[int, int]]:
    """Yield (flow_id, element_id) pairs in file order, one line at a time."""
    for lineno, line in enumerate(fh, start=1):
        if not line.endswith("\n"):
            if line.strip() and not line.lstrip().startswith("#"):
                raise TraceParseError(lineno, "truncated final line (no newline)")
            continue
        body = line.rstrip("\r\n")
        if not body.strip() or body.startswith("#"):
            continue
        parts = body.split("\t")
        if len(parts) != 2:
            raise TraceParseError(lineno, f"expected 'flow_id<TAB>element_id', got {body!r}")
        yield _token(parts[0], lineno), _token(parts[1], lineno)


def parse_header(line: str) -> dict:
    meta: dict = {}
    if not line.startswith("# vloglog-trace"):
        return meta
    for item in line.split()[2:]:
        key, _, value = item.partition("=")
        meta[key] = float(value) if key == "pi" else int(value)
    return meta


def read_trace(path) -> Trace:
    """Load a whole trace file into arrays."""
    with open(path, encoding="ascii", newline="") as fh:
        first = fh.readline()
        fh.seek(0)
        flows: list[int] = []
        elements: list[int] = []
        for f, x in parse_trace(fh):
            flows.append(f)
            elements.append(x)
    return Trace(np.array(flows, dtype=np.uint64), np.array(elements, dtype=np.uint64),
                 parse_header(first))


def true_cardinalities(packets: Iterable[tuple]) -> dict:
    """Exact distinct-element count per flow, by keeping every element."""
    seen: dict = {}
    for f, x in packets:
        seen.setdefault(f, set()).add(x)
    return {f: len(xs) for f, xs in seen.items()}


def true_cardinalities_array(flows, elements) -> tuple[np.ndarray, np.ndarray]:
    """Sorted distinct flow ids and their exact distinct-element counts."""
    pairs = np.unique(np.stack([np.asarray(flows, np.uint64), np.asarray(elements, np.uint64)]), axis=1)
    ids, counts = np.unique(pairs[0], return_counts=True)
    return ids, counts
