"""Packet-race detection.

Two packets of one session race when they travel in the same direction,
arrive within ``max_interval`` of each other, occupy overlapping sequence
ranges, and carry different bytes somewhere inside the overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .packet import (
    SEQ_MOD,
    Direction,
    FlowKey,
    PacketRecord,
    Session,
    TCPFlags,
    derive_payload_bounds,
    direction_of,
    flow_key,
    seq_add,
    seq_diff,
)

DEFAULT_MAX_INTERVAL_US = 200_000


@dataclass(frozen=True)
class DetectorParams:
    max_interval: int = DEFAULT_MAX_INTERVAL_US  # microseconds
    include_client_races: bool = False

    def __post_init__(self):
        if self.max_interval <= 0:
            raise ValueError("max_interval must be positive")

    @classmethod
    def from_ms(cls, ms: float, **kw) -> DetectorParams:
        return cls(max_interval=round(ms * 1000), **kw)


@dataclass(eq=False)
class RaceEvent:
    flow: FlowKey
    first: PacketRecord
    second: PacketRecord
    overlap: tuple[int, int]
    direction: Direction
    context: list[PacketRecord] = field(default_factory=list)

    def identity(self) -> tuple:
        return (self.flow, self.first, self.second, self.overlap)

    def __eq__(self, other):
        if not isinstance(other, RaceEvent):
            return NotImplemented
        return self.identity() == other.identity()

    def __hash__(self):
        return hash(self.identity())

    @property
    def ts(self) -> int:
        return self.first.ts

    @property
    def overlap_len(self) -> int:
        return (self.overlap[1] - self.overlap[0]) % SEQ_MOD

    def sort_key(self) -> tuple:
        return (self.flow.sort_key(), self.first.ts, self.second.ts, self.overlap)


def eligible(p: PacketRecord) -> bool:
    """Packets that may take part in a race at all."""
    return p.checksums_ok and not p.has(TCPFlags.RST) and p.payload_size > 0


def overlap_of(a: PacketRecord, b: PacketRecord) -> tuple[int, int] | None:
    """Sequence overlap ``(bottom, top)`` of two payloads, or None.

    Uses serial arithmetic so ranges that straddle 2**32 compare correctly.
    """
    a_lo, _, a_len = derive_payload_bounds(a)
    b_lo, _, b_len = derive_payload_bounds(b)
    if a_len == 0 or b_len == 0:
        return None
    d = seq_diff(b_lo, a_lo)  # offset of b's start inside a's frame
    if d >= a_len or -d >= b_len:
        return None
    lo = max(0, d)
    hi = min(a_len, d + b_len)
    return seq_add(a_lo, lo), seq_add(a_lo, hi)


def overlap_differs(a: PacketRecord, b: PacketRecord, overlap: tuple[int, int]) -> bool:
    bottom, top = overlap
    n = (top - bottom) % SEQ_MOD
    ia = (bottom - a.tcp_seq) % SEQ_MOD
    ib = (bottom - b.tcp_seq) % SEQ_MOD
    return a.payload[ia:ia + n] != b.payload[ib:ib + n]


def race_between(a: PacketRecord, b: PacketRecord) -> tuple[int, int] | None:
    """Overlap of ``a`` and ``b`` if they carry conflicting bytes."""
    if not (eligible(a) and eligible(b)):
        return None
    ov = overlap_of(a, b)
    if ov is None or not overlap_differs(a, b, ov):
        return None
    return ov


def _reportable(d: Direction, params: DetectorParams) -> bool:
    if d is Direction.SERVER_TO_CLIENT:
        return True
    return params.include_client_races


def check_race(
    cp: PacketRecord, s: Session, params: DetectorParams = DetectorParams()
) -> list[RaceEvent]:
    """Race ``cp`` against every packet already stored in ``s``."""
    d = s.direction(cp)
    if not _reportable(d, params) or not eligible(cp):
        return []
    events = []
    for op in s.packets:
        if op is cp or op.src != cp.src:
            continue
        if abs(cp.ts - op.ts) > params.max_interval:
            continue
        ov = race_between(cp, op)
        if ov is None:
            continue
        first, second = (op, cp) if op.ts <= cp.ts else (cp, op)
        events.append(RaceEvent(s.key, first, second, ov, d))
    return events


def _seq_bytes(p: PacketRecord) -> dict[int, int]:
    return {(p.tcp_seq + i) % SEQ_MOD: byte for i, byte in enumerate(p.payload)}


def _contiguous_bounds(seqs: set[int]) -> tuple[int, int]:
    start = next(s for s in seqs if (s - 1) % SEQ_MOD not in seqs)
    end = next(s for s in seqs if (s + 1) % SEQ_MOD not in seqs)
    return start, (end + 1) % SEQ_MOD


def brute_force_oracle(
    packets: Iterable[PacketRecord], params: DetectorParams = DetectorParams()
) -> list[RaceEvent]:
    """Exhaustive pairwise reference for :func:`check_race`.

    Maps every payload byte to its absolute sequence number and compares
    byte by byte, so it shares no interval arithmetic with the fast path.
    """
    packets = list(packets)
    events = []
    for j, cp in enumerate(packets):
        key = flow_key(cp)
        d = direction_of(cp, key.server_endpoint())
        if not _reportable(d, params):
            continue
        if not cp.checksums_ok or cp.tcp_flags & TCPFlags.RST:
            continue
        cp_bytes = _seq_bytes(cp)
        for op in packets[:j]:
            if flow_key(op) != key or op.src != cp.src:
                continue
            if not op.checksums_ok or op.tcp_flags & TCPFlags.RST:
                continue
            if abs(cp.ts - op.ts) > params.max_interval:
                continue
            op_bytes = _seq_bytes(op)
            common = cp_bytes.keys() & op_bytes.keys()
            if not common or all(cp_bytes[s] == op_bytes[s] for s in common):
                continue
            first, second = (op, cp) if op.ts <= cp.ts else (cp, op)
            events.append(RaceEvent(key, first, second, _contiguous_bounds(set(common)), d))
    return events


def detect_incremental(
    packets: Sequence[PacketRecord],
    params: DetectorParams = DetectorParams(),
    history_bound: int = 1 << 30,
) -> list[RaceEvent]:
    """Run :func:`check_race` in arrival order with one unbounded session per flow."""
    sessions: dict[FlowKey, Session] = {}
    events = []
    for p in packets:
        key = flow_key(p)
        s = sessions.get(key)
        if s is None:
            s = sessions[key] = Session(key, history_bound)
        events.extend(check_race(p, s, params))
        s.add(p)
    return events
