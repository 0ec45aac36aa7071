"""Flow-hash dispatch and per-worker LRU session caches.

Packets are sharded by a direction-insensitive hash of the connection's
endpoints, so every packet of one session reaches the same worker. Each
worker keeps a fixed-capacity least-recently-used session cache and races
every arriving packet against its stored session.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from collections import OrderedDict, defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .packet import FlowKey, PacketRecord, Session, flow_key, ip_to_int
from .race import DEFAULT_MAX_INTERVAL_US, DetectorParams, RaceEvent, check_race

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    workers: int = 4
    cache_capacity: int = 1 << 20
    queue_bound: int = 16
    history_bound: int = 64
    max_interval_ms: float = DEFAULT_MAX_INTERVAL_US / 1000
    batch_size: int = 256
    # packets of a raced session collected after the race before its
    # context is frozen
    context_after: int = 8

    def __post_init__(self):
        for name in ("workers", "cache_capacity", "queue_bound", "history_bound",
                     "batch_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.max_interval_ms > 0:
            raise ConfigError("max_interval_ms must be positive")
        if self.context_after < 0:
            raise ConfigError("context_after must be >= 0")

    @property
    def detector(self) -> DetectorParams:
        return DetectorParams.from_ms(self.max_interval_ms)

    @classmethod
    def from_mapping(cls, data: dict) -> PipelineConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        return asdict(self)


def _mix64(x: int) -> int:
    # splitmix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def flow_hash(p: PacketRecord) -> int:
    a = _mix64((ip_to_int(p.src_ip) << 16) | p.src_port)
    b = _mix64((ip_to_int(p.dst_ip) << 16) | p.dst_port)
    return _mix64((a + b) & _MASK64)


def dispatch(p: PacketRecord, workers: int) -> int:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return flow_hash(p) % workers


@dataclass
class _Pending:
    event: RaceEvent
    remaining: int


@dataclass
class WorkerShard:
    """One worker's session cache plus the races it has found."""

    id: int
    capacity: int
    history_bound: int = 64
    params: DetectorParams = field(default_factory=DetectorParams)
    context_after: int = 8
    sessions: OrderedDict = field(default_factory=OrderedDict)
    eviction_count: int = 0
    min_observed_idle_at_eviction: int | None = None  # microseconds
    events: list = field(default_factory=list)
    raced_sessions: list = field(default_factory=list)
    _pending: dict = field(default_factory=lambda: defaultdict(list))
    _raced: dict = field(default_factory=dict)

    def ingest(self, p: PacketRecord) -> tuple[Session, list[RaceEvent]]:
        key = flow_key(p)
        s = self.sessions.get(key)
        if s is None:
            if len(self.sessions) >= self.capacity:
                self._evict(p.ts)
            s = self.sessions[key] = Session(key, self.history_bound)
        else:
            self.sessions.move_to_end(key)
        found = check_race(p, s, self.params)
        s.add(p)
        self._advance_pending(s)
        if found:
            if id(s) not in self._raced:
                self._raced[id(s)] = s
                self.raced_sessions.append(s)
            for ev in found:
                if self.context_after == 0:
                    ev.context = list(s.packets)
                else:
                    self._pending[id(s)].append(_Pending(ev, self.context_after))
            self.events.extend(found)
        return s, found

    def _advance_pending(self, s: Session) -> None:
        pending = self._pending.get(id(s))
        if not pending:
            return
        for pend in pending:
            pend.remaining -= 1
            if pend.remaining == 0:
                pend.event.context = list(s.packets)
        pending[:] = [pend for pend in pending if pend.remaining > 0]
        if not pending:
            del self._pending[id(s)]

    def _freeze(self, s: Session) -> None:
        for pend in self._pending.pop(id(s), []):
            pend.event.context = list(s.packets)

    def _evict(self, now: int) -> None:
        key, victim = self.sessions.popitem(last=False)
        last = victim.last_activity if victim.last_activity is not None else now
        idle = now - last
        self.eviction_count += 1
        if self.min_observed_idle_at_eviction is None or idle < self.min_observed_idle_at_eviction:
            self.min_observed_idle_at_eviction = idle
        self._freeze(victim)

    def finish(self) -> None:
        for s in list(self.sessions.values()):
            self._freeze(s)
        self._pending.clear()


@dataclass
class PipelineResult:
    events: list[RaceEvent]
    raced_sessions: list[Session]
    eviction_count: int
    min_observed_idle_at_eviction: int | None
    packets: int


class Pipeline:
    """Dispatcher plus worker shards.

    ``threaded=False`` runs everything in the calling thread; the threaded
    mode runs a reader thread feeding a bounded batch queue, a dispatcher,
    and one thread per shard. Both produce the same events.
    """

    def __init__(self, config: PipelineConfig = PipelineConfig()):
        self.config = config
        params = config.detector
        self.shards = [
            WorkerShard(
                id=i,
                capacity=config.cache_capacity,
                history_bound=config.history_bound,
                params=params,
                context_after=config.context_after,
            )
            for i in range(config.workers)
        ]

    def run(self, packets: Iterable[PacketRecord], threaded: bool = False) -> PipelineResult:
        if threaded and self.config.workers > 1:
            n = self._run_threaded(packets)
        else:
            n = 0
            workers = self.config.workers
            for p in packets:
                self.shards[dispatch(p, workers)].ingest(p)
                n += 1
        for shard in self.shards:
            shard.finish()
        return self._collect(n)

    def _run_threaded(self, packets: Iterable[PacketRecord]) -> int:
        cfg = self.config
        batches: queue.Queue = queue.Queue(maxsize=cfg.queue_bound)
        inboxes = [queue.Queue(maxsize=cfg.queue_bound) for _ in self.shards]
        errors: list[BaseException] = []
        count = [0]

        def reader():
            batch = []
            try:
                for p in packets:
                    batch.append(p)
                    count[0] += 1
                    if len(batch) >= cfg.batch_size:
                        batches.put(batch)  # blocks when the queue is full
                        batch = []
                if batch:
                    batches.put(batch)
            except BaseException as e:  # surfaced to the caller below
                errors.append(e)
            finally:
                batches.put(None)

        def worker(shard: WorkerShard, inbox: queue.Queue):
            while True:
                item = inbox.get()
                if item is None:
                    return
                if errors:
                    continue
                try:
                    for p in item:
                        shard.ingest(p)
                except BaseException as e:
                    errors.append(e)

        threads = [threading.Thread(target=reader, name="reader", daemon=True)]
        threads += [
            threading.Thread(target=worker, args=(s, q), name=f"worker-{s.id}", daemon=True)
            for s, q in zip(self.shards, inboxes)
        ]
        for t in threads:
            t.start()
        workers = cfg.workers
        while True:
            batch = batches.get()
            if batch is None:
                break
            split: list[list[PacketRecord]] = [[] for _ in self.shards]
            for p in batch:
                split[dispatch(p, workers)].append(p)
            for part, inbox in zip(split, inboxes):
                if part:
                    inbox.put(part)
        for inbox in inboxes:
            inbox.put(None)
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        return count[0]

    def _collect(self, n: int) -> PipelineResult:
        events = sorted(
            (ev for s in self.shards for ev in s.events), key=RaceEvent.sort_key
        )
        sessions = [s for shard in self.shards for s in shard.raced_sessions]
        sessions.sort(key=lambda s: (s.key.sort_key(), s.created_at or 0))
        idles = [s.min_observed_idle_at_eviction for s in self.shards
                 if s.min_observed_idle_at_eviction is not None]
        return PipelineResult(
            events=events,
            raced_sessions=sessions,
            eviction_count=sum(s.eviction_count for s in self.shards),
            min_observed_idle_at_eviction=min(idles) if idles else None,
            packets=n,
        )


def recommend_capacity(
    packets: Iterable[PacketRecord], workers: int, min_idle_us: int = 600_000_000
) -> int:
    """Smallest per-worker cache size that never evicts a session idle < min_idle.

    A shard evicting at time t holds ``capacity`` sessions, all touched no
    earlier than the victim, plus the newcomer. If the victim had been idle
    less than ``min_idle`` that would put ``capacity + 1`` distinct flows in
    one window, so the peak per-window flow count is sufficient.
    """
    per_shard: list[deque] = [deque() for _ in range(workers)]
    last_seen: list[dict[FlowKey, int]] = [dict() for _ in range(workers)]
    best = 1
    for p in packets:
        w = dispatch(p, workers)
        key = flow_key(p)
        window, seen = per_shard[w], last_seen[w]
        seen[key] = p.ts
        window.append((p.ts, key))
        while window and window[0][0] < p.ts - min_idle_us:
            ts, k = window.popleft()
            if seen.get(k) == ts:
                del seen[k]
        best = max(best, len(seen))
    return best
