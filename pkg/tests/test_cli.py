import csv
import json

import pytest

from racewatch.cli import main
from racewatch.pcapio import write_pcap
from racewatch.synth import CONFOUNDERS, ScenarioSpec, generate

PATH_12 = "".join(
    f"{i}\t{ip}\n" for i, ip in enumerate(
        ["192.168.1.1", "10.10.0.1", "*", "61.152.3.1", "202.97.18.5", "202.97.33.9",
         "202.97.94.1", "202.97.50.2", "4.69.1.1", "4.69.2.2", "64.1.1.1", "93.184.216.34"], 1)
)


def _write_corpus(tmp_path, **kw):
    spec = ScenarioSpec(**{"seed": 21, "session_count": 60, "injection_fraction": 0.3, **kw})
    corpus = generate(spec)
    return corpus, corpus.write(tmp_path / "in")


def _detect(tmp_path, pcap, name="out", *extra):
    out = tmp_path / name
    assert main(["detect", str(pcap), "--out", str(out), *extra]) == 0
    return out, json.loads((out / "findings.json").read_text())


@pytest.fixture
def detected(tmp_path):
    corpus, paths = _write_corpus(tmp_path, benign_confounders=CONFOUNDERS, confounder_fraction=0.5)
    out, data = _detect(tmp_path, paths["pcap"])
    return corpus, paths, out, data


def test_detect_counts_match_truth(detected):
    corpus, _, out, data = detected
    assert data["schema_version"] == 1
    assert data["summary"]["injection_findings"] == len(corpus.injections)
    flows = {f["flow"] for f in data["findings"] if f["benign_tag"] == "none"}
    assert flows == {t.flow for t in corpus.injections}
    forged = {f["forged_packet"]["frame_index"] for f in data["findings"] if f["benign_tag"] == "none"}
    assert forged == {t.forged_index for t in corpus.injections}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "detect" and manifest["versions"]["racewatch"]
    assert manifest["evidence_files"] == len(corpus.injections)
    assert len(list((out / "evidence").glob("session-*.pcap"))) == len(corpus.injections)


def test_findings_are_order_normalized(detected):
    data = detected[3]
    keys = [(f["flow"], f["ts"], f["first"]["frame_index"], f["second"]["frame_index"])
            for f in data["findings"]]
    assert keys == sorted(keys)


def test_benign_only_corpus(tmp_path):
    corpus, paths = _write_corpus(tmp_path, injection_fraction=0.0, benign_confounders=CONFOUNDERS)
    _, data = _detect(tmp_path, paths["pcap"])
    assert data["summary"]["injection_findings"] == 0
    assert len(data["findings"]) == len(corpus.confounders)
    assert all(f["benign_tag"] != "none" for f in data["findings"])


def test_empty_capture(tmp_path):
    pcap = tmp_path / "empty.pcap"
    write_pcap(pcap, [])
    out, data = _detect(tmp_path, pcap)
    assert data["findings"] == [] and data["summary"]["race_events"] == 0
    assert (out / "manifest.json").exists()
    assert main(["report", str(out / "findings.json"), "--out", str(tmp_path / "r")]) == 0


def test_exit_codes(tmp_path):
    assert main(["detect", str(tmp_path / "missing.pcap"), "--out", str(tmp_path / "o")]) == 2
    junk = tmp_path / "junk.pcap"
    junk.write_bytes(b"not a capture at all")
    assert main(["detect", str(junk), "--out", str(tmp_path / "o")]) == 2
    pcap = tmp_path / "e.pcap"
    write_pcap(pcap, [])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"workers": 0}))
    assert main(["detect", str(pcap), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert main(["detect", str(pcap), "--workers", "-1", "--out", str(tmp_path / "o")]) == 3


def test_report_histogram_and_groups(detected, tmp_path, capsys):
    _, _, out, data = detected
    rep = tmp_path / "rep"
    assert main(["report", str(out / "findings.json"), "--out", str(rep)]) == 0
    text = (rep / "report.txt").read_text()
    assert capsys.readouterr().out.endswith(text)
    with open(rep / "timing.csv") as f:
        rows = list(csv.DictReader(f))
    inj = [f for f in data["findings"] if f["benign_tag"] == "none"]
    timed = [f for f in inj if f["delta_ms"] is not None]
    assert sum(int(r["count"]) for r in rows) == len(timed)
    assert (rep / "timing.csv").read_text() == (out / "timing.csv").read_text()
    # groups partition the injection findings
    by_group = {}
    for f in inj:
        by_group.setdefault(f["group_id"], []).append(f)
    assert sum(g["events"] for g in data["groups"]) == len(inj)
    assert {g["group_id"]: g["events"] for g in data["groups"]} == {k: len(v) for k, v in by_group.items()}


def test_locate(tmp_path):
    finding = {
        "flow": "93.184.216.34:80-10.0.0.1:4001", "ts": 5, "benign_tag": "none", "group_id": "g1",
        "forged_packet": {"src": "93.184.216.34:80", "ttl": 57},
    }
    odd = dict(finding, ts=6, forged_packet={"src": "93.184.216.34:80", "ttl": 31})
    fpath = tmp_path / "findings.json"
    fpath.write_text(json.dumps({"findings": [finding, odd]}))
    path = tmp_path / "path.txt"
    path.write_text(PATH_12)
    table = tmp_path / "table.txt"
    table.write_text("202.97.0.0/16 4134\n")
    out = tmp_path / "loc"
    assert main(["locate", str(fpath), "--path", str(path), "--table", str(table), "--out", str(out)]) == 0
    locs = json.loads((out / "location.json").read_text())["locations"]
    assert locs[0]["estimated_hops"] == 7 and locs[0]["suspected_asn"] == 4134
    assert locs[1]["suspected_asn"] is None and "nondefault_initial_ttl" in locs[1]["caveats"]
    missing = ["locate", str(fpath), "--path", str(path), "--table", str(tmp_path / "none.txt"),
               "--out", str(out)]
    assert main(missing) == 2
    table.write_text("not a prefix line\n")
    assert main(missing[:5] + [str(table), "--out", str(out)]) == 2


def test_mitigate(tmp_path):
    corpus, paths = _write_corpus(tmp_path, forged_first_fraction=1.0)
    out = tmp_path / "m"
    for mode, delay in (("improved", None), ("naive", 200.0)):
        assert main(["mitigate", str(paths["pcap"]), "--mode", mode, "--out", str(out)]) == 0
        rep = json.loads((out / "mitigation.json").read_text())
        assert rep["mode"] == mode and rep["fn_rate"] == 0.0
        assert rep["injected"] == len(corpus.injections)
        if delay is not None:
            assert rep["mean_delay_ms"] == delay
    assert main(["mitigate", str(paths["pcap"]), "--verdicts", "--out", str(out)]) == 0
    rep = json.loads((out / "mitigation.json").read_text())
    assert len(rep["verdicts"]) == sum(1 for p in corpus.packets if p.src_port == 80)


def test_mitigate_requires_labels(tmp_path):
    pcap = tmp_path / "bare.pcap"
    write_pcap(pcap, generate(ScenarioSpec(seed=1, session_count=3)).packets)
    assert main(["mitigate", str(pcap), "--out", str(tmp_path / "m")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"labels": {}}))
    assert main(["mitigate", str(pcap), "--labels", str(bad), "--out", str(tmp_path / "m")]) == 3


def test_synth_deterministic(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"session_count": 30, "injection_fraction": 0.2}))
    for name in ("a", "b"):
        assert main(["synth", "--config", str(spec), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for f in ("corpus.pcap", "corpus.labels.json", "corpus.truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7
    spec.write_text(json.dumps({"injection_fraction": 2}))
    assert main(["synth", "--config", str(spec), "--out", str(tmp_path / "c")]) == 3
    spec.write_text("{broken")
    assert main(["synth", "--config", str(spec), "--out", str(tmp_path / "c")]) == 3


def test_synth_ack_storm(tmp_path):
    out = tmp_path / "storm"
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"session_count": 5}))
    assert main(["synth", "--ack-storm", "--config", str(spec), "--out", str(out)]) == 0
    _, data = _detect(tmp_path, out / "corpus.pcap", "d")
    assert data["summary"]["injection_findings"] == 5


def test_anonymize_scrubs_client_addresses(detected, tmp_path):
    corpus, paths, _, _ = detected
    out, data = _detect(tmp_path, paths["pcap"], "anon", "--anonymize")
    clients = {p.dst_ip for p in corpus.packets if p.src_port == 80}
    text = (out / "findings.json").read_text()
    assert not any(f'"{ip}:' in text or f"-{ip}:" in text for ip in clients)
    for meta in (out / "evidence").glob("*.json"):
        body = meta.read_text()
        assert json.loads(body)["anonymized"] is True
        assert not any(ip in body for ip in clients)


def test_workers_and_threads_give_identical_findings(detected, tmp_path):
    _, paths, out, _ = detected
    base = (out / "findings.json").read_bytes()
    for w in ("4", "8"):
        o, _ = _detect(tmp_path, paths["pcap"], f"w{w}", "--workers", w, "--threaded")
        assert (o / "findings.json").read_bytes() == base
