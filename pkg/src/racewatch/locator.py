"""Estimate where a forged packet came from.

Hop distance comes from the gap between the observed TTL and the nearest
common initial TTL at or above it. That distance indexes a client-to-server
traceroute (assuming a symmetric route), and the hop address is mapped to
an autonomous system by longest-prefix match over BGP-derived prefixes.
"""

from __future__ import annotations

import ipaddress
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

DEFAULT_INITIAL_TTLS = (32, 64, 128, 255)
MIN_HOPS = 3
MAX_HOPS = 30

HOP_INDEXING_NOTE = (
    "hop index counts routers from the client along the client-to-server "
    "traceroute; the forged packet's route is assumed to be its reverse"
)


class TableError(ValueError):
    """A prefix table or path file line could not be parsed."""

    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


def initial_ttl(observed_ttl: int) -> int:
    return next(t for t in DEFAULT_INITIAL_TTLS if t >= observed_ttl)


def estimate_hops(observed_ttl: int) -> int | None:
    """Hops travelled by a packet, or None if the estimate is implausible."""
    if not 0 <= observed_ttl <= 255:
        raise ValueError(f"TTL out of range: {observed_ttl}")
    hops = initial_ttl(observed_ttl) - observed_ttl
    if hops < MIN_HOPS or hops > MAX_HOPS:
        return None
    return hops


# ------------------------------------------------------------------- paths

@dataclass(frozen=True)
class PathTrace:
    destination: str | None
    hops: tuple[tuple[int, str | None], ...]  # (hop_index from 1, ip or None)

    def __post_init__(self):
        idx = [h for h, _ in self.hops]
        if any(h < 1 for h in idx) or any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("hop indexes must start at 1 and strictly increase")

    @property
    def length(self) -> int:
        return self.hops[-1][0] if self.hops else 0

    def hop(self, index: int) -> str | None:
        for h, ip in self.hops:
            if h == index:
                return ip
        return None

    @classmethod
    def parse(cls, text: str, destination: str | None = None) -> PathTrace:
        hops = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TableError(f"expected 'hop_index<TAB>ip|*', got {raw!r}", n)
            try:
                index = int(parts[0])
                ip = None if parts[1] == "*" else str(ipaddress.IPv4Address(parts[1]))
            except ValueError as e:
                raise TableError(str(e), n) from e
            hops.append((index, ip))
        if destination is None and hops:
            destination = hops[-1][1]
        try:
            return cls(destination, tuple(hops))
        except ValueError as e:
            raise TableError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path, destination: str | None = None) -> PathTrace:
        return cls.parse(Path(path).read_text(), destination)

    def dumps(self) -> str:
        return "".join(f"{h}\t{ip or '*'}\n" for h, ip in self.hops)


_TRACEROUTE_LINE = re.compile(r"^\s*(\d+)\s+(.*)$")
_IPV4 = re.compile(r"\b(\d{1,3}(?:\.\d{1,3}){3})\b")


def parse_traceroute_output(text: str, destination: str | None = None) -> PathTrace:
    """Parse ``traceroute -n`` output into a PathTrace (first responder per hop)."""
    hops = []
    for line in text.splitlines():
        m = _TRACEROUTE_LINE.match(line)
        if not m:
            continue
        ip = _IPV4.search(m.group(2))
        hops.append((int(m.group(1)), ip.group(1) if ip else None))
    return PathTrace(destination or (hops[-1][1] if hops else None), tuple(hops))


def run_traceroute(destination: str, max_hops: int = MAX_HOPS, timeout: float = 120) -> PathTrace:
    """TCP-SYN traceroute to port 80 using the system tool (needs privileges)."""
    exe = shutil.which("traceroute")
    if exe is None:
        raise FileNotFoundError("traceroute is not installed")
    out = subprocess.run(
        [exe, "-n", "-T", "-p", "80", "-m", str(max_hops), destination],
        capture_output=True, text=True, timeout=timeout, check=True,
    ).stdout
    return parse_traceroute_output(out, destination)


# ---------------------------------------------------------------- prefixes

class PrefixTable:
    """Immutable CIDR -> ASN map with longest-prefix lookup."""

    def __init__(self, entries: Iterable[tuple[str, int]] = ()):
        self._by_len: dict[int, dict[int, int]] = {}
        self.entries: list[tuple[str, int]] = []
        for cidr, asn in entries:
            self._add(ipaddress.IPv4Network(cidr, strict=False), int(asn))
        self._lengths = sorted(self._by_len, reverse=True)

    def _add(self, net: ipaddress.IPv4Network, asn: int) -> None:
        self._by_len.setdefault(net.prefixlen, {})[int(net.network_address)] = asn
        self.entries.append((str(net), asn))

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, ip: str) -> int | None:
        addr = int(ipaddress.IPv4Address(ip))
        for plen in self._lengths:
            mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
            asn = self._by_len[plen].get(addr & mask)
            if asn is not None:
                return asn
        return None

    @classmethod
    def parse(cls, text: str) -> PrefixTable:
        entries = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TableError(f"expected 'cidr<TAB>asn', got {raw!r}", n)
            cidr, asn = parts
            if asn.upper().startswith("AS"):
                asn = asn[2:]
            try:
                net = ipaddress.IPv4Network(cidr, strict=False)
                number = int(asn)
            except ValueError as e:
                raise TableError(str(e), n) from e
            if not 0 <= number < 1 << 32:
                raise TableError(f"ASN out of range: {number}", n)
            entries.append((str(net), number))
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> PrefixTable:
        return cls.parse(Path(path).read_text())


def lookup_asn(ip: str, table: PrefixTable) -> int | None:
    return table.lookup(ip)


# ----------------------------------------------------------------- locate

@dataclass
class LocationFinding:
    observed_ttl: int
    estimated_hops: int | None
    initial_ttl: int | None
    suspected_hop_ip: str | None = None
    suspected_asn: int | None = None
    caveats: set[str] = field(default_factory=set)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "observed_ttl": self.observed_ttl,
            "estimated_hops": self.estimated_hops,
            "initial_ttl": self.initial_ttl,
            "suspected_hop_ip": self.suspected_hop_ip,
            "suspected_asn": self.suspected_asn,
            "caveats": sorted(self.caveats),
            "notes": self.notes,
            "hop_indexing": HOP_INDEXING_NOTE,
        }


def locate(
    observed_ttl: int, server_ip: str | None, path: PathTrace, table: PrefixTable
) -> LocationFinding:
    """Suspected injecting hop and AS for a forged packet's TTL."""
    if server_ip is not None and path.destination not in (None, server_ip):
        raise ValueError(f"path destination {path.destination} is not the server {server_ip}")
    hops = estimate_hops(observed_ttl)
    finding = LocationFinding(
        observed_ttl=observed_ttl,
        estimated_hops=hops,
        initial_ttl=initial_ttl(observed_ttl),
        caveats={"asymmetry_assumed"},
    )
    if hops is None:
        finding.initial_ttl = None
        finding.caveats.add("nondefault_initial_ttl")
        finding.notes.append(
            f"hop estimate outside [{MIN_HOPS}, {MAX_HOPS}]; initial TTL likely not a common default"
        )
        return finding
    if hops > path.length:
        finding.caveats.update({"hops_out_of_bounds", "path_shorter_than_estimate"})
        finding.notes.append(f"estimated {hops} hops but the path has {path.length}")
        return finding
    ip = path.hop(hops)
    finding.suspected_hop_ip = ip
    if ip is None:
        finding.notes.append(f"hop {hops} did not answer the traceroute")
        return finding
    if hops == path.length:
        finding.notes.append("suspected hop is the last hop of the path (the destination)")
    finding.suspected_asn = table.lookup(ip)
    if finding.suspected_asn is None:
        finding.notes.append(f"no prefix covers {ip}")
    return finding
