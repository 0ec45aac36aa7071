"""From raw races to injection findings.

Benign-race filtering, forged-packet identification by IP-ID and TTL
outliers, ID-mimicry flags, arrival-time statistics and grouping of events
by injected content.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .http import differing_headers, parse_response
from .packet import ID_MOD, PacketRecord, TCPFlags, seq_add, seq_diff, swap16
from .race import RaceEvent

TIMING_CONVENTION = (
    "delta = legitimate.ts - forged.ts; positive means the forged packet "
    "arrived first (won the race); ties count as legitimate-first"
)
HIST_BIN_MS = 10
HIST_RANGE_MS = 200


class BenignCategory(str, Enum):
    LOAD_BALANCER_COOKIE = "load_balancer_cookie"
    ACCEPT_RANGES_FLIP = "accept_ranges_flip"
    NONSTANDARD_X_HEADER = "nonstandard_x_header"
    SEQ_OFFSET_RETRANSMIT = "seq_offset_retransmit"
    NONCOMPLIANT_TCP = "noncompliant_tcp"
    NONE = "none"


class Pick(str, Enum):
    FIRST = "first"
    SECOND = "second"
    UNDETERMINED = "undetermined"


@dataclass(frozen=True)
class ForgeryVerdict:
    forged: Pick
    by_id_rule: Pick
    by_ttl_rule: Pick
    rules_agree: bool
    context_size: int
    confidence_notes: tuple[str, ...] = ()

    def forged_packet(self, ev: RaceEvent) -> PacketRecord | None:
        return _pick(ev, self.forged)

    def legitimate_packet(self, ev: RaceEvent) -> PacketRecord | None:
        if self.forged is Pick.FIRST:
            return ev.second
        if self.forged is Pick.SECOND:
            return ev.first
        return None


def _pick(ev: RaceEvent, pick: Pick) -> PacketRecord | None:
    if pick is Pick.FIRST:
        return ev.first
    if pick is Pick.SECOND:
        return ev.second
    return None


def _is_raced(p: PacketRecord, ev: RaceEvent) -> bool:
    return p is ev.first or p is ev.second or p == ev.first or p == ev.second


def server_context(ev: RaceEvent) -> list[PacketRecord]:
    """Packets sent by the raced packets' sender, excluding the raced pair."""
    sender = ev.first.src
    return [p for p in ev.context if p.src == sender and not _is_raced(p, ev)]


def client_context(ev: RaceEvent) -> list[PacketRecord]:
    sender = ev.first.src
    return [p for p in ev.context if p.src != sender]


# ----------------------------------------------------------- benign filters

def _http_only_category(a: bytes, b: bytes) -> BenignCategory | None:
    ra, rb = parse_response(a), parse_response(b)
    if ra is None or rb is None:
        return None
    if ra.status_line != rb.status_line:
        return None
    n = min(len(ra.body), len(rb.body))
    if ra.body[:n] != rb.body[:n]:
        return None
    diff = differing_headers(ra, rb)
    if not diff:
        return None
    if diff == {"set-cookie"}:
        return BenignCategory.LOAD_BALANCER_COOKIE
    if diff == {"accept-ranges"}:
        return BenignCategory.ACCEPT_RANGES_FLIP
    if all(name.startswith("x-") for name in diff):
        return BenignCategory.NONSTANDARD_X_HEADER
    return None


def _is_seq_offset_retransmit(ev: RaceEvent) -> bool:
    a, b = ev.first, ev.second
    if abs(seq_diff(a.tcp_seq, b.tcp_seq)) != 1:
        return False
    n = min(len(a.payload), len(b.payload))
    return n > 0 and a.payload[:n] == b.payload[:n]


def _acks_track(ev: RaceEvent) -> bool:
    sender = ev.first.src
    server = [p for p in ev.context if p.src == sender] + [ev.first, ev.second]
    valid = set()
    for p in server:
        end = p.top_seq
        if p.has(TCPFlags.SYN) or p.has(TCPFlags.FIN):
            end = seq_add(end, 1)
        valid.add(end)
    acks = [p.tcp_ack for p in client_context(ev) if p.has(TCPFlags.ACK)]
    return bool(acks) and all(a in valid for a in acks)


def _is_noncompliant(ev: RaceEvent) -> bool:
    has_handshake = any(p.has(TCPFlags.SYN) for p in ev.context)
    return not has_handshake and not _acks_track(ev)


def filter_benign(ev: RaceEvent) -> BenignCategory:
    """Tag races that match a known benign pattern; NONE otherwise."""
    category = _http_only_category(ev.first.payload, ev.second.payload)
    if category is not None:
        return category
    if _is_seq_offset_retransmit(ev):
        return BenignCategory.SEQ_OFFSET_RETRANSMIT
    if _is_noncompliant(ev):
        return BenignCategory.NONCOMPLIANT_TCP
    return BenignCategory.NONE


# ------------------------------------------------------ forged-packet rules

def _outlier_rule(values: list[int], a: int, b: int) -> Pick:
    mean = sum(values) / len(values)
    da, db = abs(a - mean), abs(b - mean)
    if math.isclose(da, db):
        return Pick.UNDETERMINED
    return Pick.FIRST if da > db else Pick.SECOND


def classify_forged(ev: RaceEvent) -> ForgeryVerdict:
    """Pick the forged packet as the IP-ID (and TTL) outlier of the session.

    Each rule compares the raced packets against the mean over the other
    packets from the same sender. The IP-ID rule decides; the TTL rule is
    consulted when the IP-ID rule ties and is otherwise recorded for
    agreement.
    """
    ctx = server_context(ev)
    if not ctx:
        u = Pick.UNDETERMINED
        return ForgeryVerdict(u, u, u, False, 0, ("no context packets",))
    ids = [p.ip_id for p in ctx]
    by_id = _outlier_rule(ids, ev.first.ip_id, ev.second.ip_id)
    by_ttl = _outlier_rule([p.ip_ttl for p in ctx], ev.first.ip_ttl, ev.second.ip_ttl)
    notes = []
    if max(ids) - min(ids) > ID_MOD // 2:
        notes.append("low confidence: context IP-IDs span a counter wrap")
    forged = by_id if by_id is not Pick.UNDETERMINED else by_ttl
    if by_id is Pick.UNDETERMINED and by_ttl is not Pick.UNDETERMINED:
        notes.append("IP-ID rule tied; TTL rule decided")
    copied = [bool(_mimicry_of(c, ev)) for c in (ev.first, ev.second)]
    if copied.count(True) == 1:
        # a legitimate stack never reuses a session's IDs; the copier is forged
        pick = Pick.FIRST if copied[0] else Pick.SECOND
        if pick is not forged:
            notes.append("IP-ID copied from another packet of the session; copier taken as forged")
        forged = pick
    agree = by_id is not Pick.UNDETERMINED and by_id is by_ttl
    return ForgeryVerdict(forged, by_id, by_ttl, agree, len(ctx), tuple(notes))


# ----------------------------------------------------------------- mimicry

def _mimicry_of(c: PacketRecord, ev: RaceEvent) -> set[str]:
    sender = ev.first.src
    pool = list(ev.context) + [ev.first, ev.second]
    client_ids = {p.ip_id for p in pool if p.src != sender}
    flags = set()
    if any(p.ip_id == c.ip_id for p in pool if p.src == sender and p is not c and p != c):
        flags.add("dup_server_id")
    if c.ip_id in client_ids:
        flags.add("dup_client_id")
    swapped = swap16(c.ip_id)
    if swapped != c.ip_id and swapped in client_ids:
        flags.add("byteswap_client_id")
    return flags


def detect_mimicry(ev: RaceEvent, verdict: ForgeryVerdict | None = None) -> set[str]:
    """Flags for forged IP-IDs copied from other packets of the session.

    With an undetermined verdict both raced packets are checked.
    """
    if verdict is None:
        verdict = classify_forged(ev)
    forged = verdict.forged_packet(ev)
    candidates = [forged] if forged is not None else [ev.first, ev.second]
    flags = set()
    for c in candidates:
        flags |= _mimicry_of(c, ev)
    return flags


# ------------------------------------------------------------------ timing

@dataclass
class TimingStats:
    deltas_us: list[int]
    histogram: list[tuple[int, int, int]]  # (lo_ms, hi_ms, count)
    forged_win_fraction: float | None
    undetermined: int = 0
    convention: str = TIMING_CONVENTION

    @property
    def count(self) -> int:
        return len(self.deltas_us)


def timing_delta(ev: RaceEvent, verdict: ForgeryVerdict) -> int | None:
    forged = verdict.forged_packet(ev)
    legit = verdict.legitimate_packet(ev)
    if forged is None:
        return None
    return legit.ts - forged.ts


def histogram(deltas_us: Sequence[int]) -> list[tuple[int, int, int]]:
    """10 ms bins over [-200, 200] ms; values outside fall in the edge bins."""
    nbins = 2 * HIST_RANGE_MS // HIST_BIN_MS
    counts = [0] * nbins
    for d in deltas_us:
        i = math.floor(d / (HIST_BIN_MS * 1000)) + nbins // 2
        counts[min(max(i, 0), nbins - 1)] += 1
    return [
        (-HIST_RANGE_MS + k * HIST_BIN_MS, -HIST_RANGE_MS + (k + 1) * HIST_BIN_MS, c)
        for k, c in enumerate(counts)
    ]


def timing_stats(
    events: Sequence[RaceEvent], verdicts: Sequence[ForgeryVerdict] | None = None
) -> TimingStats:
    if verdicts is None:
        verdicts = [classify_forged(ev) for ev in events]
    deltas = []
    undetermined = 0
    for ev, v in zip(events, verdicts):
        d = timing_delta(ev, v)
        if d is None:
            undetermined += 1
        else:
            deltas.append(d)
    wins = sum(1 for d in deltas if d > 0)
    frac = wins / len(deltas) if deltas else None
    return TimingStats(deltas, histogram(deltas) if deltas else [], frac, undetermined)


# ---------------------------------------------------------------- grouping

VOLATILE_HEADERS = {"date", "expires", "last-modified", "age"}
COOKIE_HEADERS = {"set-cookie", "cookie"}


def normalize_payload(payload: bytes) -> bytes:
    """Drop per-response noise (Date, cookie values) from an HTTP payload."""
    resp = parse_response(payload)
    if resp is None:
        return payload
    lines = [resp.status_line]
    for name, value in resp.headers:
        if name in VOLATILE_HEADERS:
            continue
        if name in COOKIE_HEADERS:
            value = ";".join(part.split("=", 1)[0].strip() for part in value.split(";"))
        lines.append(f"{name}: {value}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + resp.body


def fingerprint(payload: bytes) -> str:
    return hashlib.sha256(normalize_payload(payload)).hexdigest()[:16]


def event_fingerprint(ev: RaceEvent, verdict: ForgeryVerdict) -> str:
    forged = verdict.forged_packet(ev)
    if forged is not None:
        return fingerprint(forged.payload)
    # undetermined: key on the unordered pair of contents
    a, b = sorted((fingerprint(ev.first.payload), fingerprint(ev.second.payload)))
    return f"{a}+{b}"


@dataclass
class InjectionGroup:
    group_id: str
    payload_fingerprint: str
    events: list[RaceEvent] = field(default_factory=list)
    first_seen: int = 0
    last_seen: int = 0


def group_events(
    events: Sequence[RaceEvent], verdicts: Sequence[ForgeryVerdict] | None = None
) -> list[InjectionGroup]:
    """Partition events by normalized forged-payload fingerprint."""
    if verdicts is None:
        verdicts = [classify_forged(ev) for ev in events]
    by_fp: dict[str, list[RaceEvent]] = {}
    for ev, v in zip(events, verdicts):
        by_fp.setdefault(event_fingerprint(ev, v), []).append(ev)
    ordered = sorted(by_fp.items(), key=lambda kv: (min(e.ts for e in kv[1]), kv[0]))
    groups = []
    for n, (fp, members) in enumerate(ordered, 1):
        members.sort(key=RaceEvent.sort_key)
        groups.append(
            InjectionGroup(
                group_id=f"g{n:03d}",
                payload_fingerprint=fp,
                events=members,
                first_seen=min(e.ts for e in members),
                last_seen=max(e.second.ts for e in members),
            )
        )
    return groups


# ---------------------------------------------------------------- findings

@dataclass
class Finding:
    event: RaceEvent
    benign_tag: BenignCategory
    verdict: ForgeryVerdict
    mimicry_flags: set[str]
    delta_us: int | None
    group_id: str | None = None

    @property
    def is_injection(self) -> bool:
        return self.benign_tag is BenignCategory.NONE

    @property
    def forged(self) -> PacketRecord | None:
        return self.verdict.forged_packet(self.event)

    def to_json(self) -> dict:
        ev = self.event
        forged = self.forged

        def pkt(p: PacketRecord) -> dict:
            return {
                "ts_us": p.ts,
                "src": f"{p.src_ip}:{p.src_port}",
                "dst": f"{p.dst_ip}:{p.dst_port}",
                "seq": p.tcp_seq,
                "len": p.payload_size,
                "ip_id": p.ip_id,
                "ttl": p.ip_ttl,
                "frame_index": p.frame_index,
            }

        return {
            "flow": str(ev.flow),
            "ts": ev.ts,
            "direction": ev.direction.value,
            "overlap": list(ev.overlap),
            "first": pkt(ev.first),
            "second": pkt(ev.second),
            "verdicts": {
                "forged": self.verdict.forged.value,
                "by_id_rule": self.verdict.by_id_rule.value,
                "by_ttl_rule": self.verdict.by_ttl_rule.value,
                "rules_agree": self.verdict.rules_agree,
                "context_size": self.verdict.context_size,
                "notes": list(self.verdict.confidence_notes),
            },
            "forged_packet": pkt(forged) if forged is not None else None,
            "benign_tag": self.benign_tag.value,
            "mimicry_flags": sorted(self.mimicry_flags),
            "delta_ms": None if self.delta_us is None else self.delta_us / 1000,
            "group_id": self.group_id,
        }


def analyze(events: Sequence[RaceEvent]) -> tuple[list[Finding], list[InjectionGroup]]:
    """Run every analysis step; injection candidates are grouped by content."""
    events = sorted(events, key=RaceEvent.sort_key)
    findings = []
    for ev in events:
        verdict = classify_forged(ev)
        findings.append(
            Finding(
                event=ev,
                benign_tag=filter_benign(ev),
                verdict=verdict,
                mimicry_flags=detect_mimicry(ev, verdict),
                delta_us=timing_delta(ev, verdict),
            )
        )
    injections = [f for f in findings if f.is_injection]
    groups = group_events([f.event for f in injections], [f.verdict for f in injections])
    gid = {id(ev): g.group_id for g in groups for ev in g.events}
    for f in injections:
        f.group_id = gid[id(f.event)]
    return findings, groups
