"""Deterministic labeled HTTP traffic for exercising the detector.

Every corpus is a function of its :class:`ScenarioSpec` (seed included):
benign sessions, benign-race confounders, and injected sessions whose
forged response segment races the legitimate one.
"""

from __future__ import annotations

import email.utils
import json
import random
import string
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .packet import ID_MOD, SEQ_MOD, FlowKey, PacketRecord, TCPFlags, flow_key, make_packet, swap16
from .pcapio import write_pcap

BASE_EPOCH_US = 1_600_000_000 * 1_000_000
MSS = 1460
CLIENT_TTL = 64

ID_MODES = ("random", "dup_server", "dup_client", "byteswap_client", "aligned")
TTL_MODES = ("anomalous", "aligned")
CONFOUNDERS = (
    "load_balancer_cookie",
    "accept_ranges_flip",
    "nonstandard_x_header",
    "seq_offset_retransmit",
    "noncompliant_tcp",
)
TEMPLATES = ("redirect_302", "meta_refresh", "script_swap")
AD_HOSTS = ("ads.example.net", "cdn-ads.example.org", "track.example.com")

F, S, R, P, A = TCPFlags.FIN, TCPFlags.SYN, TCPFlags.RST, TCPFlags.PSH, TCPFlags.ACK


class SpecError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    """Knobs for one synthetic corpus.

    ``field_noise`` switches the server side to a noisier model: each
    server packet's TTL is jittered by up to +/-2 and the IP-ID counter
    occasionally jumps by up to 3000. Under noise, a fraction
    ``noise_aligned_fraction`` of injections draw their forged TTL (and,
    independently, IP-ID) from the same distribution as the server's own
    packets, which is what makes the outlier rules fail on them.
    """

    seed: int = 0
    session_count: int = 100
    injection_fraction: float = 0.2
    forged_first_fraction: float = 0.68
    delta_ms: tuple[float, float] = (1.0, 100.0)
    forged_ttl_mode: str = "anomalous"
    forged_id_mode: str = "random"
    benign_confounders: tuple[str, ...] = ()
    confounder_fraction: float = 1.0
    injector_closes_with_rst: bool = False
    field_noise: bool = False
    noise_aligned_fraction: float = 0.08
    session_gap_ms: float = 50.0
    rtt_ms: tuple[float, float] = (20.0, 120.0)
    response_segments: tuple[int, int] = (2, 6)
    seq_wrap_fraction: float = 0.1
    ack_storm_rounds: int = 3

    def __post_init__(self):
        self.delta_ms = tuple(self.delta_ms)
        self.rtt_ms = tuple(self.rtt_ms)
        self.response_segments = tuple(self.response_segments)
        self.benign_confounders = tuple(self.benign_confounders)
        self.validate()

    def validate(self) -> None:
        for name in ("injection_fraction", "forged_first_fraction", "confounder_fraction",
                     "noise_aligned_fraction", "seq_wrap_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must be in [0, 1], got {v}")
        if self.session_count < 0:
            raise SpecError("session_count must be >= 0")
        if self.forged_ttl_mode not in TTL_MODES:
            raise SpecError(f"forged_ttl_mode must be one of {TTL_MODES}")
        if self.forged_id_mode not in ID_MODES:
            raise SpecError(f"forged_id_mode must be one of {ID_MODES}")
        bad = set(self.benign_confounders) - set(CONFOUNDERS)
        if bad:
            raise SpecError(f"unknown confounders: {sorted(bad)}")
        lo, hi = self.delta_ms
        if not 0 < lo <= hi <= 200:
            raise SpecError("delta_ms must satisfy 0 < lo <= hi <= 200")
        if not 0 < self.rtt_ms[0] <= self.rtt_ms[1]:
            raise SpecError("rtt_ms must be a positive range")
        if not 1 <= self.response_segments[0] <= self.response_segments[1]:
            raise SpecError("response_segments must be a range starting at >= 1")
        if self.ack_storm_rounds < 0:
            raise SpecError("ack_storm_rounds must be >= 0")
        if self.session_gap_ms <= 0:
            raise SpecError("session_gap_ms must be positive")

    @classmethod
    def from_mapping(cls, data: dict) -> ScenarioSpec:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise SpecError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path) -> ScenarioSpec:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise SpecError(f"cannot read spec {path}: {e}") from e
        if not isinstance(data, dict):
            raise SpecError("spec must be a JSON object")
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class InjectionTruth:
    flow: str
    forged_index: int
    legit_index: int
    forged_first: bool
    forged_ttl: int
    forged_id: int
    ttl_mode: str
    id_mode: str
    template: str
    target: str
    injector_hops: int | None
    oversized: bool = False
    rst_index: int | None = None


@dataclass
class ConfounderTruth:
    flow: str
    category: str


@dataclass
class LabeledCorpus:
    spec: ScenarioSpec
    packets: list[PacketRecord]
    labels: dict[int, str]
    injections: list[InjectionTruth] = field(default_factory=list)
    confounders: list[ConfounderTruth] = field(default_factory=list)
    benign_flows: list[str] = field(default_factory=list)

    def write(self, out_dir: str | Path, stem: str = "corpus") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "pcap": out_dir / f"{stem}.pcap",
            "labels": out_dir / f"{stem}.labels.json",
            "truth": out_dir / f"{stem}.truth.json",
        }
        write_pcap(paths["pcap"], self.packets)
        paths["labels"].write_text(
            json.dumps({"labels": {str(k): v for k, v in sorted(self.labels.items())}},
                       indent=1, sort_keys=True) + "\n"
        )
        paths["truth"].write_text(json.dumps(self.truth_json(), indent=1, sort_keys=True) + "\n")
        return paths

    def truth_json(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "injections": [asdict(t) for t in self.injections],
            "confounders": [asdict(c) for c in self.confounders],
            "benign_flows": self.benign_flows,
            "packet_count": len(self.packets),
        }


# ----------------------------------------------------------------- drafting

@dataclass
class _Draft:
    ts: int
    from_server: bool
    seq: int
    ack: int
    flags: TCPFlags
    payload: bytes = b""
    ip_id: int | None = None  # None: take the sender's counter
    ttl: int | None = None
    role: str = "benign"
    tag: str = ""


@dataclass
class _Endpoints:
    client: tuple[str, int]
    server: tuple[str, int]


class _Session:
    """Accumulates drafts for one connection and turns them into packets."""

    def __init__(self, rng: random.Random, spec: ScenarioSpec, ep: _Endpoints, t0: int):
        self.rng = rng
        self.spec = spec
        self.ep = ep
        self.t0 = t0
        self.drafts: list[_Draft] = []
        self.server_hops = rng.randint(8, 20)
        self.server_ttl = rng.choice((64, 128, 255)) - self.server_hops
        self.cisn = rng.randrange(SEQ_MOD)
        if rng.random() < spec.seq_wrap_fraction:
            self.sisn = (SEQ_MOD - rng.randint(1, 4000)) % SEQ_MOD
        else:
            self.sisn = rng.randrange(SEQ_MOD)
        self.rtt = _us(rng.uniform(*spec.rtt_ms))

    def add(self, d: _Draft) -> _Draft:
        self.drafts.append(d)
        return d

    def finalize(self, client_id0: int, server_id0: int) -> list[tuple[PacketRecord, _Draft]]:
        rng, noise = self.rng, self.spec.field_noise
        order = sorted(range(len(self.drafts)), key=lambda i: (self.drafts[i].ts, i))
        cid, sid = client_id0, server_id0
        out = []
        for i in order:
            d = self.drafts[i]
            if d.from_server:
                src, dst = self.ep.server, self.ep.client
                if d.ip_id is None:
                    ip_id = sid
                    step = rng.randint(2, 3000) if noise and rng.random() < 0.2 else 1
                    sid = (sid + step) % ID_MOD
                else:
                    ip_id = d.ip_id
                if d.ttl is None:
                    ttl = self.server_ttl + (rng.randint(-2, 2) if noise else 0)
                else:
                    ttl = d.ttl
            else:
                src, dst = self.ep.client, self.ep.server
                ip_id, cid = cid, (cid + 1) % ID_MOD
                ttl = CLIENT_TTL if d.ttl is None else d.ttl
            p = make_packet(d.ts, src, dst, seq=d.seq, ack=d.ack, flags=d.flags,
                            payload=d.payload, ip_id=ip_id, ttl=ttl)
            out.append((p, d))
        return out


def _us(ms: float) -> int:
    return int(round(ms * 1000))


_PRINTABLE = (string.ascii_letters + string.digits + " .;,(){}=+-*/").encode()


def _body(rng: random.Random, n: int) -> bytes:
    return bytes(rng.choices(_PRINTABLE, k=n))


def _http_date(ts_us: int) -> str:
    return email.utils.formatdate(ts_us / 1_000_000, usegmt=True)


def _request(rng: random.Random, host: str) -> bytes:
    path = "/" + "".join(rng.choices(string.ascii_lowercase, k=rng.randint(4, 12))) + ".js"
    return (
        f"GET {path} HTTP/1.1\r\nHost: {host}\r\n"
        "User-Agent: Mozilla/5.0 (X11; Linux x86_64)\r\nAccept: */*\r\n"
        "Accept-Encoding: gzip\r\n\r\n"
    ).encode()


def _response(date: str, body: bytes, extra: Sequence[str] = ()) -> bytes:
    head = [
        "HTTP/1.1 200 OK",
        "Server: nginx",
        "Content-Type: application/javascript",
        f"Content-Length: {len(body)}",
        "Connection: keep-alive",
        f"Date: {date}",
        *extra,
    ]
    return ("\r\n".join(head) + "\r\n\r\n").encode() + body


def forged_payload(template: str, target: str, date: str, pad_to: int = 0) -> bytes:
    """Injected response shapes: redirect, meta refresh, script substitution."""
    if template == "redirect_302":
        head = ["HTTP/1.1 302 Found", "Connection: close", "Content-Length: 0",
                f"Date: {date}", f"Location: {target}"]
        body = b""
    elif template == "meta_refresh":
        body = (f'<html><head><meta http-equiv="refresh" content="0;url={target}">'
                "</head><body></body></html>").encode()
        head = ["HTTP/1.1 200 OK", "Content-Type: text/html", f"Content-Length: {len(body)}",
                "Connection: close", f"Date: {date}"]
    elif template == "script_swap":
        body = f"document.write('<script src=\"{target}\"></script>');".encode()
        head = ["HTTP/1.1 200 OK", "Content-Type: application/javascript",
                f"Content-Length: {len(body)}", "Connection: close", f"Date: {date}"]
    else:
        raise SpecError(f"unknown template {template}")
    out = ("\r\n".join(head) + "\r\n\r\n").encode() + body
    if pad_to > len(out):
        # trailing bytes past Content-Length are ignored by the client
        out += b" " * (pad_to - len(out))
    return out


class _Generator:
    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.used: set[FlowKey] = set()

    # -- addressing

    def endpoints(self) -> _Endpoints:
        rng = self.rng
        while True:
            client = (f"10.{rng.randint(0, 255)}.{rng.randint(0, 255)}.{rng.randint(1, 254)}",
                      rng.randint(1025, 65535))
            first = rng.choice([o for o in range(1, 224) if o not in (10, 127, 172, 192)])
            server = (f"{first}.{rng.randint(0, 255)}.{rng.randint(0, 255)}.{rng.randint(1, 254)}", 80)
            key = FlowKey.of(client, server)
            if key not in self.used:
                self.used.add(key)
                return _Endpoints(client, server)

    def host(self) -> str:
        return "www." + "".join(self.rng.choices(string.ascii_lowercase, k=8)) + ".example"

    # -- common session skeleton

    def handshake_and_request(self, s: _Session) -> tuple[int, int]:
        """Adds SYN/SYN-ACK/ACK/GET; returns (request ts, request length)."""
        t = s.t0
        s.add(_Draft(t, False, s.cisn, 0, S))
        s.add(_Draft(t + s.rtt, True, s.sisn, s.cisn + 1, S | A))
        t_ack = t + s.rtt + 200
        s.add(_Draft(t_ack, False, s.cisn + 1, s.sisn + 1, A))
        req = _request(self.rng, self.host())
        t_req = t_ack + 100
        s.add(_Draft(t_req, False, s.cisn + 1, s.sisn + 1, P | A, req, role="request"))
        return t_req, len(req)

    def response(self, s: _Session, extra_headers: Sequence[str] = (),
                 min_len: int = 0, single_segment: bool = False) -> bytes:
        rng = self.rng
        lo, hi = self.spec.response_segments
        nseg = 1 if single_segment else rng.randint(lo, hi)
        date = _http_date(s.t0)
        head_len = len(_response(date, b"", extra_headers))
        if single_segment:
            total = rng.randint(max(min_len, head_len + 40), max(min_len, head_len + 40) + 200)
        else:
            total = rng.randint(max((nseg - 1) * MSS + 1, min_len, head_len + 40), nseg * MSS)
        return _response(date, _body(rng, total - head_len), extra_headers)

    def send_response(self, s: _Session, data: bytes, t_first: int, req_len: int,
                      close: bool = True) -> list[_Draft]:
        """Segments ``data`` from the server, with client ACKs and teardown."""
        ack_c = s.cisn + 1 + req_len
        segs = []
        t = t_first
        for off in range(0, len(data), MSS):
            chunk = data[off:off + MSS]
            segs.append(s.add(_Draft(t, True, s.sisn + 1 + off, ack_c, P | A if off + MSS >= len(data) else A,
                                     chunk, role="response")))
            if len(segs) % 2 == 0 or off + MSS >= len(data):
                s.add(_Draft(t + 150, False, ack_c, s.sisn + 1 + off + len(chunk), A))
            t += 300
        end = s.sisn + 1 + len(data)
        if close:
            t += s.rtt // 4
            s.add(_Draft(t, True, end, ack_c, F | A))
            s.add(_Draft(t + 150, False, ack_c, end + 1, F | A))
            s.add(_Draft(t + s.rtt, True, end + 1, ack_c + 1, A))
        return segs

    # -- sessions

    def benign(self, t0: int, confounder: str | None) -> tuple[_Session, str | None]:
        if confounder == "noncompliant_tcp":
            return self.noncompliant(t0), confounder
        s = _Session(self.rng, self.spec, self.endpoints(), t0)
        rng = self.rng
        t_req, req_len = self.handshake_and_request(s)
        variants = {
            "load_balancer_cookie": (
                "Set-Cookie: SERVERID=srv-{}; path=/", lambda: f"{rng.randrange(100):02d}"),
            "accept_ranges_flip": ("Accept-Ranges: {}", None),
            "nonstandard_x_header": (
                "x-amz-request-id: {}", lambda: "".join(rng.choices("0123456789ABCDEF", k=16))),
        }
        extra: list[str] = []
        alt: list[str] = []
        if confounder in variants:
            fmt, gen = variants[confounder]
            if confounder == "accept_ranges_flip":
                extra, alt = [fmt.format("none")], [fmt.format("bytes")]
            else:
                a = gen()
                b = gen()
                while b == a:
                    b = gen()
                extra, alt = [fmt.format(a)], [fmt.format(b)]
                if confounder == "nonstandard_x_header":
                    id2 = "".join(rng.choices(string.ascii_letters, k=24))
                    id2b = "".join(rng.choices(string.ascii_letters, k=24))
                    extra.append(f"x-amz-id-2: {id2}")
                    alt.append(f"x-amz-id-2: {id2b}")
        data = self.response(s, extra)
        segs = self.send_response(s, data, t_req + s.rtt, req_len)
        if confounder in variants:
            # retransmission of the first segment, rebuilt by another server
            head_end = data.index(b"\r\n\r\n") + 4
            body = data[head_end:]
            date = _http_date(s.t0)
            rebuilt = _response(date, body, alt)
            first = segs[0]
            retx = rebuilt[:len(first.payload)]
            s.add(_Draft(first.ts + _us(rng.uniform(20, 150)), True, first.seq, first.ack,
                         first.flags, retx, role="retransmission"))
        elif confounder == "seq_offset_retransmit":
            last = segs[-1]
            s.add(_Draft(last.ts + _us(rng.uniform(20, 150)), True, last.seq + 1, last.ack,
                         last.flags, last.payload, role="retransmission"))
        return s, confounder

    def noncompliant(self, t0: int) -> _Session:
        """Unidirectional traffic from port 80 with no handshake and reused seqs."""
        rng = self.rng
        s = _Session(rng, self.spec, self.endpoints(), t0)
        seq = rng.randrange(SEQ_MOD)
        ack = rng.randrange(SEQ_MOD)
        t = t0
        n = rng.randint(3, 6)
        race_at = rng.randrange(n)
        for i in range(n):
            flags = rng.choice([A, P | A, P, TCPFlags(0), F | P | A])
            payload = bytes(rng.randrange(256) for _ in range(rng.randint(40, 400)))
            while payload.startswith(b"HTTP/"):
                payload = bytes(rng.randrange(256) for _ in range(len(payload)))
            s.add(_Draft(t, True, seq, ack, flags, payload, role="noncompliant"))
            if i == race_at:
                other = bytearray(payload)
                other[0] ^= 0xFF
                s.add(_Draft(t + _us(rng.uniform(1, 50)), True, seq, rng.randrange(SEQ_MOD),
                             rng.choice([A, P | A, P]), bytes(other), role="noncompliant"))
                t += 60_000
            seq = (seq + len(payload) + rng.randint(5000, 90000)) % SEQ_MOD
            t += _us(rng.uniform(60, 120))
        return s

    def forged_ttl(self, s: _Session) -> tuple[int, int | None]:
        rng, spec = self.rng, self.spec
        aligned = spec.forged_ttl_mode == "aligned" or (
            spec.field_noise and rng.random() < spec.noise_aligned_fraction)
        if aligned:
            jitter = rng.randint(-2, 2) if spec.field_noise else 0
            return s.server_ttl + jitter, None
        gap = 6 if spec.field_noise else 3
        while True:
            hops = rng.randint(3, max(3, s.server_hops - 1))
            ttl = rng.choice((64, 128, 255)) - hops
            if abs(ttl - s.server_ttl) >= gap:
                return ttl, hops

    def injected(self, t0: int, template: str, target: str, oversized: bool = False
                 ) -> tuple[_Session, dict]:
        rng, spec = self.rng, self.spec
        s = _Session(rng, spec, self.endpoints(), t0)
        t_req, req_len = self.handshake_and_request(s)
        forged_first = oversized or rng.random() < spec.forged_first_fraction
        delta = _us(rng.uniform(*spec.delta_ms))
        rtt = max(s.rtt, delta + 2000)
        t_legit = t_req + rtt
        t_forged = t_legit - delta if forged_first else t_legit + delta
        date = _http_date(t_forged)
        probe = forged_payload(template, target, date)
        if oversized:
            data = self.response(s, single_segment=True)
            fpay = forged_payload(template, target, date,
                                  pad_to=max(len(probe), len(data) + rng.randint(40, 200)))
        else:
            data = self.response(s, min_len=len(probe))
            fpay = probe
        ack_c = s.cisn + 1 + req_len
        ttl, hops = self.forged_ttl(s)
        forged = s.add(_Draft(t_forged, True, s.sisn + 1, ack_c, P | A, fpay, ttl=ttl,
                              role="forged"))
        rst = None
        if spec.injector_closes_with_rst:
            rst = s.add(_Draft(t_forged + 50, True, s.sisn + 1 + len(fpay), ack_c, R | A,
                               ttl=ttl, role="injector_rst"))
        if forged_first:
            s.add(_Draft(t_forged + 300, False, ack_c, s.sisn + 1 + len(fpay), A))
        segs = self.send_response(s, data, t_legit, req_len, close=not oversized)
        if oversized:
            # client already acked unsent bytes; peers ping-pong until it subsides
            legit_end = s.sisn + 1 + len(data)
            t = max(segs[-1].ts, t_forged + 300) + 1000
            for _ in range(spec.ack_storm_rounds):
                t += s.rtt // 2
                s.add(_Draft(t, True, legit_end, ack_c, A, role="storm_ack"))
                t += s.rtt // 2
                req = next(d for d in s.drafts if d.role == "request")
                s.add(_Draft(t, False, req.seq, s.sisn + 1 + len(fpay), P | A, req.payload,
                             role="storm_retransmit"))
        meta = dict(forged=forged, legit=segs[0], rst=rst, forged_first=forged_first,
                    template=template, target=target, hops=hops, oversized=oversized,
                    ttl_aligned=hops is None)
        return s, meta

    # -- IP-ID assignment with collision control

    def assign_ids(self, s: _Session, meta: dict | None) -> list[tuple[PacketRecord, _Draft]]:
        rng, spec = self.rng, self.spec
        for _ in range(1000):
            cid0 = rng.randrange(ID_MOD)
            sid0 = rng.randrange(ID_MOD - 40000) if spec.field_noise else rng.randrange(ID_MOD - 500)
            if meta is not None:
                self._forged_id(s, meta, cid0, sid0)
            pairs = s.finalize(cid0, sid0)
            if self._ids_clean(pairs, meta):
                return pairs
        raise RuntimeError("could not draw collision-free IP-IDs")

    def _forged_id(self, s: _Session, meta: dict, cid0: int, sid0: int) -> None:
        rng, spec = self.rng, self.spec
        mode = spec.forged_id_mode
        forged, rst = meta["forged"], meta["rst"]
        # client IDs count up in send order; the request follows the SYN and ACK
        req = next(d for d in s.drafts if d.role == "request")
        rank = sum(1 for d in s.drafts if not d.from_server and d.ts < req.ts)
        request_id = (cid0 + rank) % ID_MOD
        aligned_noise = (mode == "random" and spec.field_noise
                         and rng.random() < spec.noise_aligned_fraction)
        if mode == "random" and not aligned_noise:
            fid = (sid0 + 32768 + rng.randint(-8000, 8000)) % ID_MOD
        elif mode == "dup_server":
            fid = sid0  # the SYN-ACK went out first
        elif mode == "dup_client":
            fid = request_id
        elif mode == "byteswap_client":
            fid = swap16(request_id)
        else:  # aligned, or the noise model's aligned share
            span = 3000 if spec.field_noise else 200
            fid = (sid0 + rng.randint(20, span)) % ID_MOD
        meta["id_aligned"] = mode == "aligned" or aligned_noise
        forged.ip_id = fid
        if rst is not None:
            if mode in ("random", "aligned"):
                rst.ip_id = (fid + 1) % ID_MOD
            else:
                rst.ip_id = (sid0 + 32768 + rng.randint(-8000, 8000)) % ID_MOD

    def _ids_clean(self, pairs, meta) -> bool:
        client = {p.ip_id for p, d in pairs if not d.from_server}
        server = [p.ip_id for p, d in pairs if d.from_server and d.role not in ("forged", "injector_rst")]
        if len(set(server)) != len(server):
            return False
        sset = set(server)
        if client & sset or {swap16(c) for c in client} & sset:
            return False
        if any(swap16(c) == c for c in client):
            return False
        if meta is None:
            return True
        fid = meta["forged"].ip_id
        mode = self.spec.forged_id_mode
        rst = meta["rst"]
        if rst is not None and (rst.ip_id in sset or rst.ip_id in client
                                or rst.ip_id == fid or swap16(rst.ip_id) in client):
            return False
        if mode != "dup_server" and fid in sset:
            return False
        if mode not in ("dup_client",) and fid in client:
            return False
        if mode != "byteswap_client" and swap16(fid) in client:
            return False
        if swap16(fid) == fid:
            return False
        if mode == "random" and not meta["id_aligned"]:
            if not self.spec.field_noise:
                # keep clear of the server's counter, modulo the wrap
                if any(min((fid - x) % ID_MOD, (x - fid) % ID_MOD) < 6000 for x in sset):
                    return False
        return True


def _assemble(spec: ScenarioSpec, sessions) -> LabeledCorpus:
    """Merge finalized sessions into one time-ordered, labeled capture."""
    rows = []
    for order, (pairs, info) in enumerate(sessions):
        for k, (p, d) in enumerate(pairs):
            rows.append((p.ts, order, k, p, d, info))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    packets, labels = [], {}
    index_of: dict[int, int] = {}
    for i, (_, _, _, p, d, _) in enumerate(rows):
        packets.append(replace(p, frame_index=i))
        labels[i] = "injected" if d.role in ("forged", "injector_rst") else "benign"
        index_of[id(d)] = i
    corpus = LabeledCorpus(spec, packets, labels)
    for pairs, info in sessions:
        flow = str(flow_key(pairs[0][0]))
        kind = info["kind"]
        if kind == "injected":
            meta = info["meta"]
            f = packets[index_of[id(meta["forged"])]]
            corpus.injections.append(
                InjectionTruth(
                    flow=flow,
                    forged_index=index_of[id(meta["forged"])],
                    legit_index=index_of[id(meta["legit"])],
                    forged_first=meta["forged_first"],
                    forged_ttl=f.ip_ttl,
                    forged_id=f.ip_id,
                    ttl_mode="aligned" if meta["ttl_aligned"] else "anomalous",
                    id_mode="aligned" if meta["id_aligned"] and spec.forged_id_mode == "random"
                    else spec.forged_id_mode,
                    template=meta["template"],
                    target=meta["target"],
                    injector_hops=meta["hops"],
                    oversized=meta["oversized"],
                    rst_index=index_of[id(meta["rst"])] if meta["rst"] is not None else None,
                )
            )
        elif info.get("confounder"):
            corpus.confounders.append(ConfounderTruth(flow, info["confounder"]))
        else:
            corpus.benign_flows.append(flow)
    return corpus


def _targets(rng: random.Random) -> list[tuple[str, str]]:
    out = []
    for template in TEMPLATES:
        for host in AD_HOSTS:
            out.append((template, f"http://{host}/{rng.choice(['google', 'ad', 'pv'])}/{template}.js"))
    return out


def generate(spec: ScenarioSpec) -> LabeledCorpus:
    """Build a labeled corpus; identical specs give byte-identical output."""
    spec.validate()
    g = _Generator(spec)
    rng = g.rng
    n_inj = round(spec.session_count * spec.injection_fraction)
    kinds = ["injected"] * n_inj + ["benign"] * (spec.session_count - n_inj)
    rng.shuffle(kinds)
    n_benign = spec.session_count - n_inj
    n_conf = round(n_benign * spec.confounder_fraction) if spec.benign_confounders else 0
    conf_cycle = [spec.benign_confounders[i % len(spec.benign_confounders)] for i in range(n_conf)]
    conf_cycle += [None] * (n_benign - n_conf)
    rng.shuffle(conf_cycle)
    targets = _targets(rng)
    sessions = []
    gap = _us(spec.session_gap_ms)
    b = 0
    for i, kind in enumerate(kinds):
        t0 = BASE_EPOCH_US + i * gap + rng.randrange(max(1, gap // 2))
        if kind == "injected":
            template, target = rng.choice(targets)
            s, meta = g.injected(t0, template, target)
            pairs = g.assign_ids(s, meta)
            sessions.append((pairs, {"kind": kind, "meta": meta}))
        else:
            s, conf = g.benign(t0, conf_cycle[b])
            b += 1
            pairs = g.assign_ids(s, None)
            sessions.append((pairs, {"kind": kind, "confounder": conf}))
    return _assemble(spec, sessions)


def generate_ack_storm_scenario(spec: ScenarioSpec) -> LabeledCorpus:
    """Every session carries an oversized forged segment and an ACK ping-pong.

    The forged response is longer than the single legitimate segment, so the
    client acknowledges bytes the server never sent; the server answers with
    duplicate ACKs and the client retransmits its request, for
    ``spec.ack_storm_rounds`` rounds.
    """
    spec.validate()
    g = _Generator(spec)
    targets = _targets(g.rng)
    sessions = []
    gap = _us(spec.session_gap_ms)
    for i in range(spec.session_count):
        t0 = BASE_EPOCH_US + i * gap + g.rng.randrange(max(1, gap // 2))
        template, target = g.rng.choice(targets)
        s, meta = g.injected(t0, template, target, oversized=True)
        pairs = g.assign_ids(s, meta)
        sessions.append((pairs, {"kind": "injected", "meta": meta}))
    return _assemble(spec, sessions)
