"""racewatch command line: detect, locate, mitigate, synth, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .analysis import TIMING_CONVENTION, analyze, histogram
from .locator import PathTrace, PrefixTable, TableError, locate
from .mitigation import MitigationParams, Mode, UnlabeledCorpus, evaluate, load_labels
from .packet import HTTP_PORT
from .pcapio import CaptureError, CaptureSource, CaptureReader, anonymize_flow_label, write_evidence
from .synth import ScenarioSpec, SpecError, generate, generate_ack_storm_scenario
from .tracker import ConfigError, Pipeline, PipelineConfig

log = logging.getLogger("racewatch")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 2, 3


class InputError(Exception):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, args: argparse.Namespace, inputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": args.command,
        "inputs": inputs,
        "config": getattr(args, "config", None),
        "output_dir": str(out),
        "seed": getattr(args, "seed", None),
        "versions": {"racewatch": __version__, "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    _dump(out / "manifest.json", manifest)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


# ------------------------------------------------------------------ detect

def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.max_interval_ms is not None:
        overrides["max_interval_ms"] = args.max_interval_ms
    if overrides:
        cfg = PipelineConfig.from_mapping({**cfg.to_dict(), **overrides})
    return cfg


def _scrub(finding: dict) -> dict:
    """Zero client addresses in a finding's JSON."""
    finding["flow"] = anonymize_flow_label(finding["flow"])
    for key in ("first", "second", "forged_packet"):
        pkt = finding.get(key)
        if not pkt:
            continue
        for side in ("src", "dst"):
            ip, _, port = pkt[side].rpartition(":")
            if port != str(HTTP_PORT):
                pkt[side] = f"0.0.0.0:{port}"
    return finding


def _finding_order(d: dict) -> tuple:
    return (d["flow"], d["ts"], d["first"]["frame_index"], d["second"]["frame_index"])


def cmd_detect(args) -> int:
    pcap = _require(args.pcap, "capture")
    cfg = _pipeline_config(args)
    out = _out_dir(args)
    reader = CaptureReader(CaptureSource(pcap))
    try:
        result = Pipeline(cfg).run(reader, threaded=args.threaded)
    except (CaptureError, OSError) as e:
        raise InputError(str(e)) from e
    findings, groups = analyze(result.events)

    records = [f.to_json() for f in findings]
    if args.anonymize:
        records = [_scrub(r) for r in records]
    records.sort(key=_finding_order)
    injections = [f for f in findings if f.is_injection]
    deltas = [f.delta_us for f in injections if f.delta_us is not None]
    wins = sum(1 for d in deltas if d > 0)
    report = {
        "schema_version": SCHEMA_VERSION,
        "timing_convention": TIMING_CONVENTION,
        "capture": asdict(reader.stats),
        "summary": {
            "race_events": len(findings),
            "injection_findings": len(injections),
            "benign_events": len(findings) - len(injections),
            "forged_win_fraction": wins / len(deltas) if deltas else None,
            "undetermined": len(injections) - len(deltas),
        },
        "groups": [
            {
                "group_id": g.group_id,
                "payload_fingerprint": g.payload_fingerprint,
                "events": len(g.events),
                "first_seen": g.first_seen,
                "last_seen": g.last_seen,
            }
            for g in groups
        ],
        "findings": records,
    }
    _dump(out / "findings.json", report)
    _write_histogram(out / "timing.csv", deltas)
    evidence = _write_evidence(injections, out / "evidence", args.anonymize)
    write_manifest(out, args, [str(pcap)], {"pipeline": cfg.to_dict(), "evidence_files": evidence})
    print(f"{len(injections)} injection finding(s), {len(findings) - len(injections)} benign race(s)")
    return EXIT_OK


def _write_histogram(path: Path, deltas_us) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lo_ms", "hi_ms", "count"])
    w.writerows(histogram(deltas_us))
    path.write_text(buf.getvalue())


def _write_evidence(injections, out: Path, anonymize_client: bool) -> int:
    latest = {}
    for f in injections:
        key = str(f.event.flow)
        if key not in latest or f.event.sort_key() > latest[key].event.sort_key():
            latest[key] = f
    for n, key in enumerate(sorted(latest)):
        ev = latest[key].event
        pkts = {}
        for p in list(ev.context) + [ev.first, ev.second]:
            pkts.setdefault((p.ts, p.frame_index, p.tcp_seq, p.payload), p)
        ordered = sorted(pkts.values(), key=lambda p: (p.ts, p.frame_index))
        write_evidence(ordered, "injection race", out, name=f"session-{n:04d}",
                       anonymize_client=anonymize_client, flow=key)
    return len(latest)


# ------------------------------------------------------------------ locate

def _load_findings(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: {e}") from e
    if not isinstance(data, dict) or "findings" not in data:
        raise InputError(f"{path} is not a findings report")
    return data


def cmd_locate(args) -> int:
    findings_path = _require(args.findings, "findings report")
    path_file = _require(args.path, "path file")
    table_file = _require(args.table, "prefix table")
    try:
        path = PathTrace.load(path_file, args.server)
        table = PrefixTable.load(table_file)
    except TableError as e:
        raise InputError(str(e)) from e
    data = _load_findings(findings_path)
    out = _out_dir(args)
    located, skipped = [], []
    for f in data["findings"]:
        forged = f.get("forged_packet")
        if f.get("benign_tag") != "none" or forged is None:
            continue
        server_ip = forged["src"].rpartition(":")[0]
        if path.destination is not None and server_ip != path.destination:
            skipped.append(f["flow"])
            continue
        loc = locate(forged["ttl"], server_ip, path, table)
        located.append({"flow": f["flow"], "ts": f["ts"], "group_id": f.get("group_id"), **loc.to_json()})
    _dump(out / "location.json", {
        "schema_version": SCHEMA_VERSION,
        "path_destination": path.destination,
        "locations": located,
        "skipped_other_destination": sorted(set(skipped)),
    })
    write_manifest(out, args, [str(findings_path), str(path_file), str(table_file)])
    print(f"located {len(located)} finding(s); {len(skipped)} skipped (other destination)")
    return EXIT_OK


# ---------------------------------------------------------------- mitigate

def _default_labels(pcap: Path) -> Path:
    return pcap.with_name(pcap.stem + ".labels.json")


def cmd_mitigate(args) -> int:
    pcap = _require(args.pcap, "capture")
    labels_path = Path(args.labels) if args.labels else _default_labels(pcap)
    if not labels_path.is_file():
        raise UnlabeledCorpus(f"no labels for {pcap} (looked for {labels_path})")
    labels = load_labels(labels_path)
    try:
        packets = list(CaptureReader(CaptureSource(pcap)))
    except (CaptureError, OSError) as e:
        raise InputError(str(e)) from e
    out = _out_dir(args)
    report = evaluate(packets, labels, Mode(args.mode), MitigationParams())
    _dump(out / "mitigation.json", {"schema_version": SCHEMA_VERSION,
                                    **report.to_json(with_verdicts=args.verdicts)})
    write_manifest(out, args, [str(pcap), str(labels_path)], {"mode": args.mode})
    print(f"{args.mode}: fn_rate {report.fn_rate:.4f}, mean delay {report.mean_delay_ms:.2f} ms")
    return EXIT_OK


# ------------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    spec_data = {}
    if args.config:
        try:
            spec_data = json.loads(_require(args.config, "scenario spec").read_text())
        except json.JSONDecodeError as e:
            raise SpecError(f"{args.config}: {e}") from e
        if not isinstance(spec_data, dict):
            raise SpecError("scenario spec must be a JSON object")
    if args.seed is not None:
        spec_data["seed"] = args.seed
    spec = ScenarioSpec.from_mapping(spec_data)
    out = _out_dir(args)
    corpus = generate_ack_storm_scenario(spec) if args.ack_storm else generate(spec)
    paths = corpus.write(out, args.stem)
    write_manifest(out, args, [args.config] if args.config else [],
                   {"seed": spec.seed, "spec": spec.to_dict(),
                    "outputs": {k: str(v) for k, v in paths.items()}})
    print(f"{len(corpus.packets)} packets, {len(corpus.injections)} injected session(s) -> {paths['pcap']}")
    return EXIT_OK


# ------------------------------------------------------------------ report

def render_report(data: dict) -> str:
    findings = data["findings"]
    inj = [f for f in findings if f.get("benign_tag") == "none"]
    lines = [
        f"race events: {len(findings)}",
        f"injection findings: {len(inj)}",
        f"benign races: {len(findings) - len(inj)}",
    ]
    tags: dict[str, int] = {}
    for f in findings:
        if f.get("benign_tag") != "none":
            tags[f["benign_tag"]] = tags.get(f["benign_tag"], 0) + 1
    for tag in sorted(tags):
        lines.append(f"  {tag}: {tags[tag]}")
    deltas = [f["delta_ms"] for f in inj if f.get("delta_ms") is not None]
    if deltas:
        wins = sum(1 for d in deltas if d > 0)
        lines.append(f"forged packet first: {wins}/{len(deltas)} ({wins / len(deltas):.1%})")
    lines.append(f"timing: {data.get('timing_convention', TIMING_CONVENTION)}")
    groups: dict[str, int] = {}
    for f in inj:
        groups[f.get("group_id")] = groups.get(f.get("group_id"), 0) + 1
    if groups:
        lines.append("groups:")
        for gid in sorted(groups, key=str):
            lines.append(f"  {gid}: {groups[gid]} event(s)")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    path = _require(args.findings, "findings report")
    data = _load_findings(path)
    out = _out_dir(args)
    text = render_report(data)
    (out / "report.txt").write_text(text)
    deltas = [
        round(f["delta_ms"] * 1000)
        for f in data["findings"]
        if f.get("benign_tag") == "none" and f.get("delta_ms") is not None
    ]
    _write_histogram(out / "timing.csv", deltas)
    write_manifest(out, args, [str(path)])
    sys.stdout.write(text)
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="racewatch", description="Detect and analyze TCP packet-injection races in HTTP captures.")
    parser.add_argument("--version", action="version", version=f"racewatch {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="find packet races and analyze them")
    p.add_argument("pcap")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", default="racewatch-out")
    p.add_argument("--anonymize", action="store_true", help="zero client addresses in outputs")
    p.add_argument("--workers", type=int)
    p.add_argument("--max-interval-ms", type=float)
    p.add_argument("--threaded", action="store_true", help="run shards in worker threads")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("locate", help="estimate the injecting hop and AS")
    p.add_argument("findings")
    p.add_argument("--path", required=True, help="traceroute path file (hop_index<TAB>ip)")
    p.add_argument("--table", required=True, help="prefix table (cidr<TAB>asn)")
    p.add_argument("--server", help="path destination, if the file does not end at it")
    p.add_argument("--out", default="racewatch-out")
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("mitigate", help="replay a labeled capture through a mitigation mode")
    p.add_argument("pcap")
    p.add_argument("--labels", help="labels JSON (default: <pcap stem>.labels.json)")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.IMPROVED.value)
    p.add_argument("--verdicts", action="store_true", help="include per-packet verdicts")
    p.add_argument("--out", default="racewatch-out")
    p.set_defaults(func=cmd_mitigate)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--config", help="scenario spec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--stem", default="corpus")
    p.add_argument("--ack-storm", action="store_true", help="oversized injections with ACK ping-pong")
    p.add_argument("--out", default="racewatch-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="summarize a findings report")
    p.add_argument("findings")
    p.add_argument("--out", default="racewatch-out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, SpecError, UnlabeledCorpus) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except (InputError, OSError, CaptureError) as e:
        log.error("%s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
