"""Client-side blocking of forged segments.

The naive mode holds every incoming segment for the race window and blocks
any held segment that a later conflicting segment races. The improved mode
holds only segments whose TTL or IP-ID is out of line with the session; the
rest are accepted at once. Both run on a virtual clock driven by packet
timestamps, so replays are deterministic.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .packet import ID_MOD, Direction, FlowKey, PacketRecord, direction_of, flow_key
from .race import race_between


class Mode(str, Enum):
    NAIVE = "naive"
    IMPROVED = "improved"


class Action(str, Enum):
    ACCEPT = "accept"
    DELAY_THEN_ACCEPT = "delay_then_accept"
    BLOCK = "block"


@dataclass(frozen=True)
class MitigationParams:
    hold_time: int = 200_000  # microseconds
    ttl_slack: float = 1
    id_back: int = 10
    id_fwd: int = 5000


@dataclass(frozen=True)
class MitigationVerdict:
    packet: PacketRecord
    action: Action
    delay_incurred: int  # microseconds
    reason: str
    decided_at: int


@dataclass
class _Held:
    packet: PacketRecord
    enqueued_at: int
    reason: str

    def deadline(self, params: MitigationParams) -> int:
        return self.enqueued_at + params.hold_time


@dataclass
class MitigationState:
    """Per-session state; owned by one replay driver."""

    average_ttl: float | None = None
    accepted: int = 0
    last_id: int | None = None
    suspicious_queue: list[_Held] = field(default_factory=list)

    def learn(self, p: PacketRecord) -> None:
        self.accepted += 1
        if self.average_ttl is None:
            self.average_ttl = float(p.ip_ttl)
        else:
            self.average_ttl += (p.ip_ttl - self.average_ttl) / self.accepted
        self.last_id = p.ip_id


def id_in_window(ip_id: int, last_id: int, back: int = 10, fwd: int = 5000) -> bool:
    """Is ``ip_id`` within [last_id - back, last_id + fwd] modulo 2**16?"""
    return (ip_id - (last_id - back)) % ID_MOD <= back + fwd


def suspicion(state: MitigationState, p: PacketRecord, params: MitigationParams) -> str:
    """Reason a packet looks out of line with its session, or ''."""
    reasons = []
    if abs(p.ip_ttl - state.average_ttl) > params.ttl_slack:
        reasons.append(f"ttl {p.ip_ttl} vs average {state.average_ttl:.2f}")
    if not id_in_window(p.ip_id, state.last_id, params.id_back, params.id_fwd):
        reasons.append(f"ip_id {p.ip_id} outside window of last id {state.last_id}")
    return "; ".join(reasons)


def release_due(
    state: MitigationState, now: int, params: MitigationParams
) -> list[MitigationVerdict]:
    """Release held packets whose hold expired strictly before ``now``."""
    out, keep = [], []
    for h in state.suspicious_queue:
        deadline = h.deadline(params)
        if deadline < now:
            out.append(
                MitigationVerdict(h.packet, Action.DELAY_THEN_ACCEPT, params.hold_time,
                                  f"held ({h.reason}); no race within hold time", deadline)
            )
        else:
            keep.append(h)
    state.suspicious_queue = keep
    return out


def _block_racing(
    state: MitigationState, cp: PacketRecord, now: int
) -> list[MitigationVerdict]:
    out, keep = [], []
    for h in state.suspicious_queue:
        if h.packet.src == cp.src and race_between(cp, h.packet) is not None:
            out.append(
                MitigationVerdict(h.packet, Action.BLOCK, now - h.enqueued_at,
                                  "raced by a later segment", now)
            )
        else:
            keep.append(h)
    state.suspicious_queue = keep
    return out


def process_packet_improved(
    state: MitigationState, cp: PacketRecord, now: int,
    params: MitigationParams = MitigationParams(),
) -> list[MitigationVerdict]:
    """Handle one incoming segment; returns every verdict decided at ``now``.

    The list holds verdicts for previously held packets (released or
    blocked) and, unless ``cp`` was itself held, the verdict for ``cp``.
    """
    out = release_due(state, now, params)
    out += _block_racing(state, cp, now)
    if state.average_ttl is None:
        state.learn(cp)
        out.append(MitigationVerdict(cp, Action.ACCEPT, 0, "first packet of session", now))
        return out
    reason = suspicion(state, cp, params)
    if reason:
        state.suspicious_queue.append(_Held(cp, now, reason))
    else:
        state.learn(cp)
        out.append(MitigationVerdict(cp, Action.ACCEPT, 0, "in line with session", now))
    return out


def process_packet_naive(
    state: MitigationState, cp: PacketRecord, now: int,
    params: MitigationParams = MitigationParams(),
) -> list[MitigationVerdict]:
    """Hold every segment; block held segments raced during their hold."""
    out = release_due(state, now, params)
    out += _block_racing(state, cp, now)
    state.suspicious_queue.append(_Held(cp, now, "naive hold"))
    return out


def flush(state: MitigationState, params: MitigationParams) -> list[MitigationVerdict]:
    """Release everything still held (end of replay)."""
    far = max((h.deadline(params) for h in state.suspicious_queue), default=0) + 1
    return release_due(state, far, params)


_PROCESSORS = {Mode.NAIVE: process_packet_naive, Mode.IMPROVED: process_packet_improved}


class MitigationEngine:
    """Replay driver: one state per session, one global virtual clock."""

    def __init__(self, mode: Mode | str = Mode.IMPROVED, params: MitigationParams = MitigationParams()):
        self.mode = Mode(mode)
        self.params = params
        self.states: dict[FlowKey, MitigationState] = defaultdict(MitigationState)
        self._process = _PROCESSORS[self.mode]
        self.now = None

    def feed(self, p: PacketRecord) -> list[MitigationVerdict]:
        """Advance the clock to ``p.ts`` and process ``p`` if it is incoming."""
        now = p.ts if self.now is None else max(self.now, p.ts)
        self.now = now
        out = []
        for st in self.states.values():
            if st.suspicious_queue:
                out += release_due(st, now, self.params)
        key = flow_key(p)
        if direction_of(p, key.server_endpoint()) is not Direction.SERVER_TO_CLIENT:
            return out
        out += self._process(self.states[key], p, now, self.params)
        return out

    def finish(self) -> list[MitigationVerdict]:
        out = []
        for st in self.states.values():
            out += flush(st, self.params)
        return out

    def run(self, packets: Iterable[PacketRecord]) -> list[MitigationVerdict]:
        out = []
        for p in sorted(packets, key=lambda q: q.ts):
            out += self.feed(p)
        out += self.finish()
        return out


# -------------------------------------------------------------- evaluation

class UnlabeledCorpus(ValueError):
    pass


@dataclass
class MitigationReport:
    mode: Mode
    injected: int
    fn_count: int
    fn_rate: float
    blocks: int
    false_blocks: int
    delays: int
    accepted: int
    mean_delay_ms: float
    mean_flow_delay_ms: float
    verdicts: list[MitigationVerdict] = field(default_factory=list, repr=False)

    def to_json(self, with_verdicts: bool = False) -> dict:
        out = {
            "mode": self.mode.value,
            "injected": self.injected,
            "fn_count": self.fn_count,
            "fn_rate": self.fn_rate,
            "blocks": self.blocks,
            "false_blocks": self.false_blocks,
            "delays": self.delays,
            "accepted": self.accepted,
            "mean_delay_ms": self.mean_delay_ms,
            "mean_flow_delay_ms": self.mean_flow_delay_ms,
        }
        if with_verdicts:
            out["verdicts"] = [
                {
                    "frame_index": v.packet.frame_index,
                    "action": v.action.value,
                    "delay_ms": v.delay_incurred / 1000,
                    "reason": v.reason,
                }
                for v in sorted(self.verdicts, key=lambda v: (v.packet.ts, v.packet.frame_index))
            ]
        return out


def load_labels(path: str | Path) -> dict[int, str]:
    data = json.loads(Path(path).read_text())
    labels = data.get("labels", data) if isinstance(data, dict) else None
    if not isinstance(labels, dict) or not labels:
        raise UnlabeledCorpus(f"{path} holds no packet labels")
    out = {}
    for k, v in labels.items():
        if v not in ("injected", "benign"):
            raise UnlabeledCorpus(f"bad label {v!r} for packet {k}")
        out[int(k)] = v
    return out


def evaluate(
    packets: Sequence[PacketRecord],
    labels: Mapping[int, str] | None,
    mode: Mode | str = Mode.IMPROVED,
    params: MitigationParams = MitigationParams(),
) -> MitigationReport:
    """Replay a labeled corpus and count missed injections and added delay.

    Labels are keyed by frame index (position in the capture). A false
    negative is an injected packet that ends up accepted.
    """
    if not labels:
        raise UnlabeledCorpus("evaluation needs ground-truth labels")
    engine = MitigationEngine(mode, params)
    verdicts = engine.run(packets)

    def label(p: PacketRecord) -> str:
        return labels.get(p.frame_index, "benign")

    injected = sum(
        1 for p in packets
        if label(p) == "injected"
        and direction_of(p, flow_key(p).server_endpoint()) is Direction.SERVER_TO_CLIENT
    )
    fn = sum(1 for v in verdicts if v.action is not Action.BLOCK and label(v.packet) == "injected")
    blocks = [v for v in verdicts if v.action is Action.BLOCK]
    accepted = [v for v in verdicts if v.action is not Action.BLOCK]
    per_flow: dict[FlowKey, list[int]] = defaultdict(list)
    for v in accepted:
        per_flow[flow_key(v.packet)].append(v.delay_incurred)
    total = sum(v.delay_incurred for v in accepted)
    return MitigationReport(
        mode=engine.mode,
        injected=injected,
        fn_count=fn,
        fn_rate=fn / injected if injected else 0.0,
        blocks=len(blocks),
        false_blocks=sum(1 for v in blocks if label(v.packet) != "injected"),
        delays=sum(1 for v in accepted if v.action is Action.DELAY_THEN_ACCEPT),
        accepted=len(accepted),
        mean_delay_ms=total / len(accepted) / 1000 if accepted else 0.0,
        mean_flow_delay_ms=(
            sum(sum(d) / len(d) for d in per_flow.values()) / len(per_flow) / 1000
            if per_flow else 0.0
        ),
        verdicts=verdicts,
    )
