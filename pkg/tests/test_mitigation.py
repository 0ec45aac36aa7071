import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racewatch.mitigation import (
    Action,
    MitigationEngine,
    MitigationParams,
    MitigationState,
    Mode,
    UnlabeledCorpus,
    evaluate,
    flush,
    id_in_window,
    load_labels,
    process_packet_improved,
    process_packet_naive,
)
from racewatch.packet import ID_MOD

from builders import cli, srv

HOLD = MitigationParams().hold_time


def _modular_window(last_id, back=10, fwd=5000):
    """Every ID reachable by stepping from last_id - back up to last_id + fwd."""
    return {(last_id + d) % ID_MOD for d in range(-back, fwd + 1)}


def test_window_boundary_at_wrap():
    assert id_in_window(4464, 65000)
    assert not id_in_window(4465, 65000)
    assert id_in_window(64990, 65000) and not id_in_window(64989, 65000)


@pytest.mark.parametrize("last_id", [0, 5, 9, 10, 30000, 60535, 60536, 65000, 65535])
def test_window_matches_enumeration(last_id):
    inside = _modular_window(last_id)
    assert len(inside) == 5011
    assert {i for i in range(ID_MOD) if id_in_window(i, last_id)} == inside


def _steady(n=5, t0=0, ttl=57):
    return [srv(t0 + i * 1000, 1000 + i * 100, b"a" * 100, ip_id=4000 + i, ttl=ttl) for i in range(n)]


def _state_after(packets):
    st_ = MitigationState()
    for p in packets:
        process_packet_improved(st_, p, p.ts)
    return st_


def test_first_packet_initialises_state():
    st_ = MitigationState()
    (v,) = process_packet_improved(st_, srv(0, 1, b"x", ttl=60, ip_id=9), 0)
    assert v.action is Action.ACCEPT and v.delay_incurred == 0
    assert st_.average_ttl == 60 and st_.last_id == 9


def test_anomalous_ttl_held_then_blocked_by_legit():
    base = _steady()
    st_ = _state_after(base)
    forged = srv(10_000, 1500, b"F" * 60, ip_id=4005, ttl=49)
    assert process_packet_improved(st_, forged, forged.ts) == []
    assert len(st_.suspicious_queue) == 1
    legit = srv(40_000, 1500, b"L" * 100, ip_id=4005, ttl=57)
    out = process_packet_improved(st_, legit, legit.ts)
    by_packet = {v.packet: v for v in out}
    assert by_packet[forged].action is Action.BLOCK
    assert by_packet[forged].delay_incurred == 30_000
    assert by_packet[legit].action is Action.ACCEPT and by_packet[legit].delay_incurred == 0
    assert st_.suspicious_queue == []


def test_in_window_packet_accepted_immediately():
    st_ = _state_after(_steady())
    p = srv(10_000, 1500, b"b" * 10, ip_id=4004 + 100, ttl=58)
    (v,) = process_packet_improved(st_, p, p.ts)
    assert v.action is Action.ACCEPT and v.delay_incurred == 0
    assert st_.last_id == 4104


def test_suspicious_packets_do_not_update_state():
    st_ = _state_after(_steady())
    before = (st_.average_ttl, st_.last_id, st_.accepted)
    process_packet_improved(st_, srv(10_000, 9000, b"z", ip_id=30000), 10_000)
    assert (st_.average_ttl, st_.last_id, st_.accepted) == before


def test_unraced_suspicious_released_after_hold():
    st_ = _state_after(_steady())
    odd = srv(10_000, 1500, b"z" * 10, ip_id=30000)
    process_packet_improved(st_, odd, odd.ts)
    later = srv(10_000 + HOLD, 9000, b"q", ip_id=4006)
    # exactly at the deadline: still held
    out = process_packet_improved(st_, later, later.ts)
    assert all(v.packet != odd for v in out)
    out = process_packet_improved(st_, srv(10_001 + HOLD, 9100, b"r", ip_id=4007), 10_001 + HOLD)
    (v,) = [v for v in out if v.packet == odd]
    assert v.action is Action.DELAY_THEN_ACCEPT and v.delay_incurred == HOLD


def test_naive_holds_benign_for_full_window():
    st_ = MitigationState()
    pkts = _steady(3)
    out = []
    for p in pkts:
        out += process_packet_naive(st_, p, p.ts)
    assert out == []
    out += flush(st_, MitigationParams())
    assert [v.action for v in out] == [Action.DELAY_THEN_ACCEPT] * 3
    assert all(v.delay_incurred == HOLD for v in out)


def test_naive_blocks_earlier_of_injected_pair():
    st_ = MitigationState()
    forged = srv(0, 1000, b"F" * 50, ip_id=4000)
    legit = srv(30_000, 1000, b"L" * 50, ip_id=4001)
    process_packet_naive(st_, forged, forged.ts)
    (v,) = process_packet_naive(st_, legit, legit.ts)
    assert v.packet == forged and v.action is Action.BLOCK
    (rest,) = flush(st_, MitigationParams())
    assert rest.packet == legit and rest.action is Action.DELAY_THEN_ACCEPT


@pytest.mark.parametrize("mode", list(Mode))
def test_empty_stream_has_no_verdicts(mode):
    assert MitigationEngine(mode).run([]) == []


def test_engine_ignores_client_packets():
    verdicts = MitigationEngine(Mode.NAIVE).run([cli(0), cli(5, 2)])
    assert verdicts == []


def test_forged_after_legit_is_harmless():
    base = _steady()
    legit = srv(10_000, 1500, b"L" * 100, ip_id=4005)
    forged = srv(40_000, 1500, b"F" * 60, ip_id=22222, ttl=49)
    verdicts = MitigationEngine(Mode.IMPROVED).run(base + [legit, forged])
    by_packet = {v.packet: v for v in verdicts}
    assert by_packet[legit].action is Action.ACCEPT and by_packet[legit].delay_incurred == 0
    assert by_packet[forged].action is not Action.BLOCK


def test_every_packet_gets_exactly_one_verdict():
    pkts = _steady(6) + [srv(7000, 1200, b"X" * 50, ip_id=40000, ttl=40)]
    for mode in Mode:
        verdicts = MitigationEngine(mode).run(pkts)
        assert sorted(v.packet.ts for v in verdicts) == sorted(p.ts for p in pkts)


streams = st.lists(
    st.tuples(st.integers(0, 1_000_000), st.integers(0, 3000), st.integers(1, 80),
              st.integers(0, ID_MOD - 1), st.sampled_from([49, 56, 57, 58, 64])),
    max_size=40,
)


@settings(max_examples=150, deadline=None)
@given(streams, st.sampled_from(list(Mode)))
def test_queue_liveness(rows, mode):
    pkts = sorted((srv(t, 1000 + s, b"p" * n, ip_id=i, ttl=ttl) for t, s, n, i, ttl in rows),
                  key=lambda p: p.ts)
    engine = MitigationEngine(mode)
    decided = []
    for p in pkts:
        decided += engine.feed(p)
        for st_ in engine.states.values():
            for h in st_.suspicious_queue:
                # anything still held has not outlived its hold time
                assert h.enqueued_at + HOLD >= engine.now
    decided += engine.finish()
    assert len(decided) == len(pkts)
    for v in decided:
        assert 0 <= v.delay_incurred <= HOLD
        if v.action is Action.ACCEPT:
            assert v.delay_incurred == 0


# -------------------------------------------------------------- evaluation

def test_evaluate_requires_labels():
    with pytest.raises(UnlabeledCorpus):
        evaluate(_steady(), {})
    with pytest.raises(UnlabeledCorpus):
        evaluate(_steady(), None)


def test_evaluate_counts_false_negatives():
    base = [replace(p, frame_index=i) for i, p in enumerate(_steady())]
    forged = replace(srv(10_000, 1500, b"F" * 60, ip_id=4005, ttl=49), frame_index=5)
    legit = replace(srv(40_000, 1500, b"L" * 100, ip_id=4005), frame_index=6)
    labels = {5: "injected"}
    rep = evaluate(base + [forged, legit], labels, Mode.IMPROVED)
    assert (rep.injected, rep.fn_count, rep.blocks, rep.false_blocks) == (1, 0, 1, 0)
    assert rep.mean_delay_ms == 0.0
    naive = evaluate(base + [forged, legit], labels, Mode.NAIVE)
    assert naive.fn_count == 0 and naive.mean_delay_ms == HOLD / 1000
    doc = rep.to_json(with_verdicts=True)
    assert doc["mode"] == "improved" and len(doc["verdicts"]) == 7


def test_load_labels(tmp_path):
    good = tmp_path / "l.json"
    good.write_text(json.dumps({"labels": {"0": "benign", "3": "injected"}}))
    assert load_labels(good) == {0: "benign", 3: "injected"}
    for body in ({"labels": {}}, {"labels": {"1": "maybe"}}, [1, 2]):
        bad = tmp_path / "b.json"
        bad.write_text(json.dumps(body))
        with pytest.raises(UnlabeledCorpus):
            load_labels(bad)
