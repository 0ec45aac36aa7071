"""Classic pcap input/output, HTTP port filtering and evidence files."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence, Union

from .packet import HTTP_PORT, PacketRecord, TCPFlags, int_to_ip, ip_to_int

log = logging.getLogger(__name__)

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
DEFAULT_SNAPLEN = 65535
EVIDENCE_PACKETS = 30
DETECTOR_VERSION = "1"

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = 0x8100
CLIENT_MAC = bytes.fromhex("020000000001")
SERVER_MAC = bytes.fromhex("020000000002")


class CaptureError(Exception):
    """The capture cannot be read at all."""


class UnsupportedLinkType(CaptureError):
    pass


@dataclass
class CaptureStats:
    frames: int = 0
    emitted: int = 0
    non_ip: int = 0
    ipv6: int = 0
    non_tcp: int = 0
    fragments: int = 0
    filtered: int = 0
    malformed: int = 0
    truncated_records: int = 0
    snaplen_truncated: int = 0
    bad_checksums: int = 0

    @property
    def skipped(self) -> int:
        return self.frames - self.emitted


# (ts_us, frame bytes) pairs; anything iterable works as a live adapter.
FrameSource = Iterable[tuple[int, bytes]]


@dataclass
class CaptureSource:
    origin: Union[str, Path, FrameSource]
    ports: frozenset[int] | None = frozenset({HTTP_PORT})
    verify_checksums: bool = True

    def accepts(self, sport: int, dport: int) -> bool:
        return self.ports is None or sport in self.ports or dport in self.ports


# ---------------------------------------------------------------- checksums

def inet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _tcp_pseudo(src: bytes, dst: bytes, tcp_len: int) -> bytes:
    return src + dst + struct.pack("!BBH", 0, 6, tcp_len)


# ------------------------------------------------------------------ reading

def _open_frames(path: Path, stats: CaptureStats) -> Iterator[tuple[int, bytes]]:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise CaptureError(f"cannot open {path}: {e}") from e
    with f:
        yield from _iter_pcap(f, stats, str(path))


def _iter_pcap(f: BinaryIO, stats: CaptureStats, name: str) -> Iterator[tuple[int, bytes]]:
    header = f.read(24)
    if len(header) < 24:
        raise CaptureError(f"{name}: missing pcap global header")
    magic_le = struct.unpack("<I", header[:4])[0]
    if magic_le == PCAP_MAGIC:
        endian = "<"
    elif magic_le == int.from_bytes(PCAP_MAGIC.to_bytes(4, "little"), "big"):
        endian = ">"
    elif PCAP_MAGIC_NS in (magic_le, struct.unpack(">I", header[:4])[0]):
        raise CaptureError(f"{name}: nanosecond pcap is not supported")
    else:
        raise CaptureError(f"{name}: bad pcap magic {header[:4].hex()}")
    _, _, _, _, snaplen, linktype = struct.unpack(endian + "HHiIII", header[4:])
    if linktype != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"{name}: link type {linktype} is not Ethernet")
    rec = struct.Struct(endian + "IIII")
    while True:
        hdr = f.read(16)
        if not hdr:
            return
        if len(hdr) < 16:
            stats.truncated_records += 1
            log.warning("%s: truncated record header", name)
            return
        sec, usec, caplen, _orig = rec.unpack(hdr)
        data = f.read(caplen)
        if len(data) < caplen:
            stats.truncated_records += 1
            log.warning("%s: truncated record data", name)
            return
        yield sec * 1_000_000 + usec, data


def parse_frame(
    ts: int, frame: bytes, source: CaptureSource, stats: CaptureStats, index: int = -1
) -> PacketRecord | None:
    """Decode one Ethernet frame; returns None (and counts why) when skipped."""
    if len(frame) < 14:
        stats.malformed += 1
        return None
    off = 12
    ethertype = struct.unpack_from("!H", frame, off)[0]
    off += 2
    if ethertype == ETH_VLAN:
        if len(frame) < 18:
            stats.malformed += 1
            return None
        ethertype = struct.unpack_from("!H", frame, off + 2)[0]
        off += 4
    if ethertype == ETH_IPV6:
        stats.ipv6 += 1
        return None
    if ethertype != ETH_IPV4:
        stats.non_ip += 1
        return None
    ip = frame[off:]
    if len(ip) < 20 or ip[0] >> 4 != 4:
        stats.malformed += 1
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len, ip_id, frag, ttl, proto, ip_csum = struct.unpack_from("!HHHBBH", ip, 2)
    if ihl < 20 or total_len < ihl:
        stats.malformed += 1
        return None
    if len(ip) < total_len:
        stats.snaplen_truncated += 1
        return None
    if frag & 0x3FFF:
        stats.fragments += 1
        return None
    if proto != 6:
        stats.non_tcp += 1
        return None
    ip = ip[:total_len]  # drop Ethernet padding
    if total_len - ihl < 20:
        stats.malformed += 1
        return None
    sport, dport, seq, ack, off_flags, window = struct.unpack_from("!HHIIHH", ip, ihl)
    doff = off_flags >> 12
    if doff < 5 or ihl + doff * 4 > total_len:
        stats.malformed += 1
        return None
    if not source.accepts(sport, dport):
        stats.filtered += 1
        return None
    ip_ok = tcp_ok = True
    if source.verify_checksums:
        # an all-zero field is treated as not computed (offload or anonymized)
        if ip_csum:
            ip_ok = inet_checksum(ip[:ihl]) == 0
        tcp_csum = struct.unpack_from("!H", ip, ihl + 16)[0]
        if tcp_csum:
            seg = ip[ihl:]
            tcp_ok = inet_checksum(_tcp_pseudo(ip[12:16], ip[16:20], len(seg)) + seg) == 0
        if not (ip_ok and tcp_ok):
            stats.bad_checksums += 1
    stats.emitted += 1
    return PacketRecord(
        ts=ts,
        src_ip=int_to_ip(int.from_bytes(ip[12:16], "big")),
        dst_ip=int_to_ip(int.from_bytes(ip[16:20], "big")),
        src_port=sport,
        dst_port=dport,
        ip_id=ip_id,
        ip_ttl=ttl,
        ip_total_length=total_len,
        ip_header_length=ihl,
        tcp_seq=seq,
        tcp_ack=ack,
        tcp_flags=TCPFlags(off_flags & 0x1F),
        tcp_data_offset=doff,
        payload=bytes(ip[ihl + doff * 4:]),
        ip_checksum_ok=ip_ok,
        tcp_checksum_ok=tcp_ok,
        tcp_window=window,
        frame_index=index,
    )


class CaptureReader:
    """Iterates PacketRecords from a pcap file or a frame source.

    Skipped frames are tallied in :attr:`stats`.
    """

    def __init__(self, source: CaptureSource):
        self.source = source
        self.stats = CaptureStats()

    def frames(self) -> Iterator[tuple[int, bytes]]:
        origin = self.source.origin
        if isinstance(origin, (str, Path)):
            return _open_frames(Path(origin), self.stats)
        return iter(origin)

    def __iter__(self) -> Iterator[PacketRecord]:
        for index, (ts, frame) in enumerate(self.frames()):
            self.stats.frames += 1
            p = parse_frame(ts, frame, self.source, self.stats, index)
            if p is not None:
                yield p
        if self.stats.snaplen_truncated:
            log.warning(
                "%d packets were cut by the capture snap length and ignored",
                self.stats.snaplen_truncated,
            )


def read_capture(source: CaptureSource | str | Path, **kw) -> CaptureReader:
    if not isinstance(source, CaptureSource):
        source = CaptureSource(source, **kw)
    return CaptureReader(source)


# ------------------------------------------------------------------ writing

def build_frame(p: PacketRecord, *, zero_checksums: bool = False) -> bytes:
    """Serialize a PacketRecord as an Ethernet/IPv4/TCP frame.

    Checksums are computed; a record marked with a bad checksum gets a
    deliberately wrong value so that it re-reads identically.
    """
    src = ip_to_int(p.src_ip).to_bytes(4, "big")
    dst = ip_to_int(p.dst_ip).to_bytes(4, "big")
    ip_opts = b"\x01" * (p.ip_header_length - 20)  # NOP padding
    tcp_opts = b"\x01" * (p.tcp_data_offset * 4 - 20)
    tcp = bytearray(
        struct.pack(
            "!HHIIHHHH",
            p.src_port,
            p.dst_port,
            p.tcp_seq,
            p.tcp_ack,
            (p.tcp_data_offset << 12) | int(p.tcp_flags),
            p.tcp_window,
            0,
            0,
        )
        + tcp_opts
        + p.payload
    )
    if not zero_checksums:
        csum = inet_checksum(_tcp_pseudo(src, dst, len(tcp)) + bytes(tcp))
        if not p.tcp_checksum_ok:
            csum = (csum ^ 0x5A5A) or 1
        struct.pack_into("!H", tcp, 16, csum)
    ip = bytearray(
        struct.pack(
            "!BBHHHBBH4s4s",
            0x40 | (p.ip_header_length // 4),
            0,
            p.ip_total_length,
            p.ip_id,
            0x4000,  # DF
            p.ip_ttl,
            6,
            0,
            src,
            dst,
        )
        + ip_opts
    )
    if not zero_checksums:
        csum = inet_checksum(bytes(ip))
        if not p.ip_checksum_ok:
            csum = (csum ^ 0x5A5A) or 1
        struct.pack_into("!H", ip, 10, csum)
    from_server = p.src_port == HTTP_PORT
    eth = (CLIENT_MAC + SERVER_MAC) if from_server else (SERVER_MAC + CLIENT_MAC)
    return eth + struct.pack("!H", ETH_IPV4) + bytes(ip) + bytes(tcp)


class PcapWriter:
    def __init__(self, f: BinaryIO, snaplen: int = DEFAULT_SNAPLEN):
        self.f = f
        self.snaplen = snaplen
        self.count = 0
        f.write(struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))

    def write_frame(self, ts: int, frame: bytes) -> None:
        sec, usec = divmod(ts, 1_000_000)
        cap = frame[: self.snaplen]
        self.f.write(struct.pack("<IIII", sec, usec, len(cap), len(frame)))
        self.f.write(cap)
        self.count += 1

    def write(self, p: PacketRecord, **kw) -> None:
        self.write_frame(p.ts, build_frame(p, **kw))


def write_pcap(path: str | Path, packets: Iterable[PacketRecord], **kw) -> int:
    with open(path, "wb") as f:
        w = PcapWriter(f)
        for p in packets:
            w.write(p, **kw)
        return w.count


# ----------------------------------------------------------------- evidence

def anonymize(p: PacketRecord) -> PacketRecord:
    """Zero the client (non-port-80) address of a packet."""
    if p.src_port == HTTP_PORT and p.dst_port != HTTP_PORT:
        return replace(p, dst_ip="0.0.0.0")
    if p.dst_port == HTTP_PORT and p.src_port != HTTP_PORT:
        return replace(p, src_ip="0.0.0.0")
    return p


@dataclass
class EvidenceFile:
    pcap_path: Path
    meta_path: Path
    packets: int
    meta: dict = field(default_factory=dict)


def write_evidence(
    packets: Sequence[PacketRecord],
    reason: str,
    out_dir: str | Path,
    *,
    name: str,
    anonymize_client: bool = False,
    flow: str = "",
) -> EvidenceFile:
    """Write the last 30 packets of a raced session plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tail = list(packets)[-EVIDENCE_PACKETS:]
    if anonymize_client:
        tail = [anonymize(p) for p in tail]
        if flow:
            flow = anonymize_flow_label(flow)
    pcap_path = out_dir / f"{name}.pcap"
    meta_path = out_dir / f"{name}.json"
    write_pcap(pcap_path, tail, zero_checksums=anonymize_client)
    meta = {
        "flow": flow,
        "reason": reason,
        "detector_version": DETECTOR_VERSION,
        "anonymized": anonymize_client,
        "packets": len(tail),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return EvidenceFile(pcap_path, meta_path, len(tail), meta)


def anonymize_flow_label(flow: str) -> str:
    parts = []
    for ep in flow.split("-"):
        ip, _, port = ep.rpartition(":")
        parts.append(ep if port == str(HTTP_PORT) else f"0.0.0.0:{port}")
    return "-".join(parts)
