from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racewatch.packet import SEQ_MOD, Session, TCPFlags, flow_key, make_packet
from racewatch.race import (
    DetectorParams,
    brute_force_oracle,
    check_race,
    detect_incremental,
    overlap_of,
    race_between,
)

from builders import CLIENT, REDIRECT_302, SCRIPT_OK, SERVER, cli, srv

W = DetectorParams().max_interval


def _session(*packets):
    s = Session(flow_key(packets[0]))
    for p in packets:
        s.add(p)
    return s


def test_redirect_race():
    legit = srv(0, 5000, SCRIPT_OK, ip_id=4001)
    forged = srv(40_000, 5000, REDIRECT_302, ip_id=47000, ttl=49)
    evs = check_race(forged, _session(legit))
    assert len(evs) == 1
    ev = evs[0]
    assert (ev.first, ev.second) == (legit, forged)
    assert ev.overlap == (5000, 5000 + len(REDIRECT_302))
    assert detect_incremental([legit, forged]) == evs == brute_force_oracle([legit, forged])


def test_identical_retransmission_is_not_a_race():
    a = srv(0, 5000, SCRIPT_OK)
    b = srv(50_000, 5000, SCRIPT_OK, ip_id=4005)
    assert check_race(b, _session(a)) == []


def test_partial_overlap_bounds():
    a = srv(0, 1000, b"a" * 536)
    b = srv(10, 1400, b"b" * 500)
    (ev,) = check_race(b, _session(a))
    assert ev.overlap == (1400, 1536)
    assert ev.overlap_len == 136


def test_overlap_across_sequence_wrap():
    a = srv(0, SEQ_MOD - 4, b"abcdefgh")
    b = srv(10, SEQ_MOD - 2, b"XYZ")
    assert overlap_of(a, b) == (SEQ_MOD - 2, 1)
    assert race_between(a, b) == (SEQ_MOD - 2, 1)
    assert brute_force_oracle([a, b])[0].overlap == (SEQ_MOD - 2, 1)


def test_adjacent_segments_do_not_overlap():
    assert overlap_of(srv(0, 1000, b"a" * 10), srv(1, 1010, b"b" * 10)) is None


@pytest.mark.parametrize("field", [{"tcp_checksum_ok": False}, {"ip_checksum_ok": False}])
def test_bad_checksum_excluded(field):
    a = srv(0, 1000, b"a" * 10)
    b = replace(srv(5, 1000, b"b" * 10), **field)
    assert check_race(b, _session(a)) == []
    assert check_race(a, _session(b)) == []
    assert brute_force_oracle([a, b]) == []


def test_rst_excluded():
    a = srv(0, 1000, b"a" * 10)
    b = srv(5, 1000, b"b" * 10, flags=TCPFlags.RST | TCPFlags.ACK)
    assert detect_incremental([a, b]) == [] == brute_force_oracle([a, b])


def test_zero_payload_never_races():
    a = srv(0, 1000, b"a" * 10)
    b = srv(5, 1000)
    assert detect_incremental([a, b]) == []


def test_client_races_only_on_request():
    a = cli(0, 1, 9, b"GET / HTTP/1.1\r\n\r\n")
    b = cli(5, 1, 9, b"GET /x HTTP/1.1\r\n\r\n", ip_id=101)
    assert detect_incremental([a, b]) == []
    both = DetectorParams(include_client_races=True)
    assert len(detect_incremental([a, b], both)) == 1
    assert len(brute_force_oracle([a, b], both)) == 1


def test_opposite_directions_never_race():
    a = srv(0, 1000, b"a" * 10)
    b = make_packet(5, CLIENT, SERVER, seq=1000, payload=b"b" * 10)
    assert detect_incremental([a, b], DetectorParams(include_client_races=True)) == []


@pytest.mark.parametrize("dt,expected", [(W - 1, 1), (W, 1), (W + 1, 0)])
def test_window_is_inclusive(dt, expected):
    a = srv(1_000_000, 1000, b"a" * 10)
    b = srv(1_000_000 + dt, 1000, b"b" * 10)
    assert len(detect_incremental([a, b])) == expected
    assert len(brute_force_oracle([a, b])) == expected


def test_custom_window():
    a = srv(0, 1000, b"a" * 10)
    b = srv(150_000, 1000, b"b" * 10)
    assert detect_incremental([a, b], DetectorParams.from_ms(100)) == []


def test_out_of_order_arrival_orders_event_by_timestamp():
    late = srv(90, 1000, b"b" * 10)
    early = srv(10, 1000, b"a" * 10)
    (ev,) = detect_incremental([late, early])
    assert (ev.first, ev.second) == (early, late)


def test_invalid_params():
    with pytest.raises(ValueError):
        DetectorParams(max_interval=0)


# -------------------------------------------------------------- properties

def _segments(times, seqs, bodies, rst, bad):
    return st.builds(
        lambda ts, seq, payload, server, is_rst, is_bad: make_packet(
            ts,
            SERVER if server else CLIENT,
            CLIENT if server else SERVER,
            seq=seq,
            payload=payload,
            flags=TCPFlags.RST if is_rst else TCPFlags.ACK,
            tcp_checksum_ok=not is_bad,
        ),
        times, seqs, bodies, st.booleans(), rst, bad,
    )


# sequence numbers in a narrow band straddling the wrap, tiny alphabets so
# overlaps and equal bytes are both common
seq_band = st.integers(-40, 40).map(lambda d: d % SEQ_MOD)
payloads = st.binary(min_size=0, max_size=24).map(lambda b: bytes(x % 3 for x in b))
rare = st.sampled_from([False, False, False, False, True])
packet_lists = st.lists(
    _segments(st.integers(0, 400_000), seq_band, payloads, rare, rare), max_size=25
).map(lambda ps: sorted(ps, key=lambda p: p.ts))


@settings(max_examples=300, deadline=None)
@given(packet_lists, st.booleans())
def test_incremental_matches_oracle(packets, client_races):
    params = DetectorParams(include_client_races=client_races)
    fast = detect_incremental(packets, params)
    slow = brute_force_oracle(packets, params)
    assert Counter(e.identity() for e in fast) == Counter(e.identity() for e in slow)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, SEQ_MOD - 1), st.integers(1, 600), st.integers(-600, 600),
       st.integers(1, 600), st.integers(0, W))
def test_race_symmetric_in_arrival_order(seq, la, off, lb, dt):
    a = srv(0, seq, b"a" * la)
    b = srv(dt, (seq + off) % SEQ_MOD, b"b" * lb)
    ab = detect_incremental([a, b])
    ba = detect_incremental([replace(b, ts=0), replace(a, ts=dt)])
    assert len(ab) == len(ba)
    if ab:
        assert ab[0].overlap == ba[0].overlap


@settings(max_examples=200, deadline=None)
@given(packet_lists)
def test_events_never_contain_excluded_packets(packets):
    for ev in detect_incremental(packets):
        for p in (ev.first, ev.second):
            assert p.checksums_ok and not p.has(TCPFlags.RST) and p.payload_size > 0
