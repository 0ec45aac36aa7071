from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from racewatch.packet import (
    SEQ_MOD,
    Direction,
    FlowKey,
    MalformedPacket,
    PacketRecord,
    Session,
    TCPFlags,
    derive_payload_bounds,
    direction_of,
    flow_key,
    make_packet,
    seq_add,
    seq_diff,
    swap16,
)
from racewatch.pcapio import build_frame

from builders import CLIENT, SERVER, cli, srv

ips = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
ports = st.integers(1, 65535)


def test_payload_bounds_example():
    # 576 total - 20 IP - 20 TCP = 536 payload bytes
    p = srv(0, 1000, b"a" * 536)
    assert p.ip_total_length == 576
    assert derive_payload_bounds(p) == (1000, 1536, 536)


def test_payload_bounds_empty():
    assert derive_payload_bounds(srv(0, 1000)) == (1000, 1000, 0)


def test_payload_bounds_wraps():
    lo, hi, n = derive_payload_bounds(srv(0, SEQ_MOD - 8, b"z" * 16))
    assert (lo, hi, n) == (SEQ_MOD - 8, 8, 16)


def test_payload_bounds_rejects_bad_lengths():
    p = srv(0, 1, b"abc")
    with pytest.raises(MalformedPacket):
        derive_payload_bounds(replace(p, ip_total_length=30))
    with pytest.raises(MalformedPacket):
        derive_payload_bounds(replace(p, ip_header_length=16))


@given(st.binary(max_size=1500), st.integers(0, 10), st.integers(0, 10), st.integers(0, SEQ_MOD - 1))
def test_payload_bounds_match_frame_bytes(payload, ip_opts, tcp_opts, seq):
    p = make_packet(0, CLIENT, SERVER, seq=seq, payload=payload,
                    ip_header_length=20 + 4 * ip_opts, tcp_data_offset=5 + tcp_opts)
    frame = build_frame(p)
    # count bytes after the Ethernet, IP and TCP headers as they appear on the wire
    ihl = (frame[14] & 0x0F) * 4
    doff = (frame[14 + ihl + 12] >> 4) * 4
    on_wire = len(frame) - 14 - ihl - doff
    lo, hi, n = derive_payload_bounds(p)
    assert n == on_wire == len(payload)
    assert hi == (lo + n) % SEQ_MOD
    assert (hi - lo) % SEQ_MOD == n  # never a negative length


def test_flow_key_examples():
    k = flow_key(cli(0))
    assert flow_key(srv(0, 1)) == k
    other = make_packet(0, ("10.0.0.1", 4002), SERVER)
    assert flow_key(other) != k
    assert str(k) == "1.2.3.4:80-10.0.0.1:4001"
    assert k.server_endpoint() == SERVER


@given(ips, ports, ips, ports)
def test_flow_key_symmetric(a, pa, b, pb):
    p = make_packet(0, (a, pa), (b, pb))
    assert flow_key(p) == flow_key(p.reversed())
    assert hash(flow_key(p)) == hash(flow_key(p.reversed()))


def test_server_endpoint_ambiguous_when_both_or_neither_port_80():
    assert FlowKey.of(("1.1.1.1", 80), ("2.2.2.2", 80)).server_endpoint() is None
    assert FlowKey.of(("1.1.1.1", 81), ("2.2.2.2", 82)).server_endpoint() is None
    p = make_packet(0, ("1.1.1.1", 81), ("2.2.2.2", 82))
    assert direction_of(p, None) is Direction.UNKNOWN


@given(st.integers(0, SEQ_MOD - 1), st.integers(-(2**31) + 1, 2**31 - 1))
def test_seq_diff_inverts_seq_add(a, d):
    assert seq_diff(seq_add(a, d), a) == d


@given(st.integers(0, 0xFFFF))
def test_swap16_involution(x):
    assert swap16(swap16(x)) == x


def test_swap16_example():
    assert swap16(0xABCD) == 0xCDAB


def test_flags_and_checksums():
    p = make_packet(0, CLIENT, SERVER, flags=TCPFlags.RST | TCPFlags.ACK, tcp_checksum_ok=False)
    assert p.has(TCPFlags.RST) and not p.has(TCPFlags.SYN)
    assert not p.checksums_ok


def test_frame_index_not_part_of_equality():
    a = srv(5, 1, b"x")
    assert replace(a, frame_index=9) == a


def test_session_keeps_time_order_and_bound():
    s = Session(flow_key(cli(0)), history_bound=3)
    for ts in (10, 30, 20):
        s.add(srv(ts, ts))
    assert [p.ts for p in s.packets] == [10, 20, 30]
    s.add(srv(5, 5))  # older than a full history: dropped
    assert [p.ts for p in s.packets] == [10, 20, 30]
    s.add(srv(25, 25))
    assert [p.ts for p in s.packets] == [20, 25, 30]
    assert s.last_activity == 30 and s.created_at == 10


def test_session_direction_stats():
    s = Session(flow_key(cli(0)))
    s.add(srv(1, 1, ttl=57, ip_id=7))
    s.add(srv(2, 2, ttl=59, ip_id=8))
    s.add(cli(3))
    st_ = s.stats[Direction.SERVER_TO_CLIENT]
    assert st_.ttl_mean == 58 and st_.last_id == 8
    assert s.stats[Direction.CLIENT_TO_SERVER].packets == 1


def test_record_is_immutable():
    p = srv(0, 1)
    assert isinstance(p, PacketRecord)
    with pytest.raises(AttributeError):
        p.ts = 3
