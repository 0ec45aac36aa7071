"""Packet, flow and session model shared by the rest of the toolkit."""

from __future__ import annotations

import ipaddress
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum, IntFlag
from functools import lru_cache

SEQ_MOD = 1 << 32
ID_MOD = 1 << 16
HTTP_PORT = 80


class MalformedPacket(ValueError):
    """Header length fields disagree with the total length."""


class TCPFlags(IntFlag):
    # bit values match the on-wire flags byte
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


class Direction(Enum):
    SERVER_TO_CLIENT = "server_to_client"
    CLIENT_TO_SERVER = "client_to_server"
    UNKNOWN = "unknown"


@lru_cache(maxsize=65536)
def ip_to_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def seq_add(a: int, b: int) -> int:
    return (a + b) % SEQ_MOD


def seq_diff(a: int, b: int) -> int:
    """Signed distance a - b in serial-number arithmetic (RFC 1982 style)."""
    d = (a - b) % SEQ_MOD
    return d - SEQ_MOD if d >= SEQ_MOD // 2 else d


def swap16(value: int) -> int:
    return ((value & 0xFF) << 8) | (value >> 8)


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One captured IPv4/TCP packet.

    ``ts`` is the capture time in integer microseconds so that window
    comparisons are exact. ``frame_index`` is the position of the frame in
    its source capture (-1 for packets built in memory).
    """

    ts: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    ip_id: int
    ip_ttl: int
    ip_total_length: int
    ip_header_length: int
    tcp_seq: int
    tcp_ack: int
    tcp_flags: TCPFlags
    tcp_data_offset: int
    payload: bytes = b""
    ip_checksum_ok: bool = True
    tcp_checksum_ok: bool = True
    tcp_window: int = 29200
    frame_index: int = field(default=-1, compare=False)

    @property
    def headers_size(self) -> int:
        return self.ip_header_length + self.tcp_data_offset * 4

    @property
    def payload_size(self) -> int:
        return self.ip_total_length - self.headers_size

    @property
    def top_seq(self) -> int:
        return seq_add(self.tcp_seq, self.payload_size)

    @property
    def src(self) -> tuple[str, int]:
        return (self.src_ip, self.src_port)

    @property
    def dst(self) -> tuple[str, int]:
        return (self.dst_ip, self.dst_port)

    @property
    def checksums_ok(self) -> bool:
        return self.ip_checksum_ok and self.tcp_checksum_ok

    def has(self, flag: TCPFlags) -> bool:
        return bool(self.tcp_flags & flag)

    def reversed(self) -> PacketRecord:
        """Same packet with source and destination swapped (test helper)."""
        return replace(
            self,
            src_ip=self.dst_ip,
            dst_ip=self.src_ip,
            src_port=self.dst_port,
            dst_port=self.src_port,
        )


def make_packet(
    ts: int,
    src: tuple[str, int],
    dst: tuple[str, int],
    *,
    seq: int = 0,
    ack: int = 0,
    flags: TCPFlags = TCPFlags.ACK,
    payload: bytes = b"",
    ip_id: int = 0,
    ttl: int = 64,
    ip_header_length: int = 20,
    tcp_data_offset: int = 5,
    **extra,
) -> PacketRecord:
    """Build a PacketRecord whose length fields agree with ``payload``."""
    return PacketRecord(
        ts=ts,
        src_ip=src[0],
        dst_ip=dst[0],
        src_port=src[1],
        dst_port=dst[1],
        ip_id=ip_id % ID_MOD,
        ip_ttl=ttl,
        ip_total_length=ip_header_length + tcp_data_offset * 4 + len(payload),
        ip_header_length=ip_header_length,
        tcp_seq=seq % SEQ_MOD,
        tcp_ack=ack % SEQ_MOD,
        tcp_flags=TCPFlags(flags),
        tcp_data_offset=tcp_data_offset,
        payload=payload,
        **extra,
    )


def derive_payload_bounds(p: PacketRecord) -> tuple[int, int, int]:
    """Return ``(seq_lo, seq_hi, payload_len)`` for a packet.

    ``seq_hi`` is exclusive and wraps modulo 2**32.
    """
    if p.ip_header_length < 20 or p.tcp_data_offset * 4 < 20:
        raise MalformedPacket(
            f"header too short: ip={p.ip_header_length} tcp={p.tcp_data_offset * 4}"
        )
    payload_len = p.ip_total_length - p.headers_size
    if payload_len < 0:
        raise MalformedPacket(
            f"total length {p.ip_total_length} < headers {p.headers_size}"
        )
    return p.tcp_seq, seq_add(p.tcp_seq, payload_len), payload_len


def _endpoint_order(ep: tuple[str, int]) -> tuple[int, int]:
    return (ip_to_int(ep[0]), ep[1])


@dataclass(frozen=True, slots=True, order=True)
class FlowKey:
    """Direction-insensitive identity of a TCP connection."""

    endpoint_a: tuple[str, int]
    endpoint_b: tuple[str, int]

    @classmethod
    def of(cls, x: tuple[str, int], y: tuple[str, int]) -> FlowKey:
        if _endpoint_order(y) < _endpoint_order(x):
            x, y = y, x
        return cls(x, y)

    def __str__(self) -> str:
        (ia, pa), (ib, pb) = self.endpoint_a, self.endpoint_b
        return f"{ia}:{pa}-{ib}:{pb}"

    def sort_key(self) -> tuple[int, int, int, int]:
        return _endpoint_order(self.endpoint_a) + _endpoint_order(self.endpoint_b)

    def server_endpoint(self) -> tuple[str, int] | None:
        a80 = self.endpoint_a[1] == HTTP_PORT
        b80 = self.endpoint_b[1] == HTTP_PORT
        if a80 == b80:
            return None
        return self.endpoint_a if a80 else self.endpoint_b


def flow_key(p: PacketRecord) -> FlowKey:
    return FlowKey.of(p.src, p.dst)


def direction_of(p: PacketRecord, server: tuple[str, int] | None) -> Direction:
    if server is None:
        return Direction.UNKNOWN
    return Direction.SERVER_TO_CLIENT if p.src == server else Direction.CLIENT_TO_SERVER


@dataclass
class DirectionStats:
    packets: int = 0
    ttl_mean: float = 0.0
    last_id: int | None = None

    def update(self, p: PacketRecord) -> None:
        self.packets += 1
        self.ttl_mean += (p.ip_ttl - self.ttl_mean) / self.packets
        self.last_id = p.ip_id


class Session:
    """Bounded, time-ordered packet history for one flow.

    A session is owned by a single worker and is never shared.
    """

    def __init__(self, key: FlowKey, history_bound: int = 64):
        if history_bound <= 0:
            raise ValueError("history_bound must be positive")
        self.key = key
        self.server_endpoint = key.server_endpoint()
        self.packets: deque[PacketRecord] = deque(maxlen=history_bound)
        self.last_activity: int | None = None
        self.created_at: int | None = None
        self.stats = {
            Direction.SERVER_TO_CLIENT: DirectionStats(),
            Direction.CLIENT_TO_SERVER: DirectionStats(),
        }

    @property
    def ambiguous(self) -> bool:
        return self.server_endpoint is None

    def direction(self, p: PacketRecord) -> Direction:
        return direction_of(p, self.server_endpoint)

    def add(self, p: PacketRecord) -> None:
        if self.packets and p.ts < self.packets[-1].ts:
            # capture clocks occasionally step backwards; keep history sorted
            i = len(self.packets)
            while i > 0 and self.packets[i - 1].ts > p.ts:
                i -= 1
            if len(self.packets) == self.packets.maxlen:
                if i == 0:
                    return
                self.packets.popleft()
                i -= 1
            self.packets.insert(i, p)
        else:
            self.packets.append(p)
        if self.created_at is None:
            self.created_at = p.ts
        self.last_activity = p.ts if self.last_activity is None else max(p.ts, self.last_activity)
        d = self.direction(p)
        if d in self.stats:
            self.stats[d].update(p)

    def __len__(self) -> int:
        return len(self.packets)

    def __repr__(self) -> str:
        return f"Session({self.key}, {len(self.packets)} packets)"
