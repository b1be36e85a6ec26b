"""Campaign manifests, the end-to-end comparison and report emission."""

import csv
import hashlib
import io
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from testbed_fidelity import __version__, markov
from testbed_fidelity.errors import FidelityError, ManifestError, TooFewSamples, ZeroBaselineMean
from testbed_fidelity.estimator import SyscallChainModel
from testbed_fidelity.pcap_flows import (
    assemble_flows,
    experiment_stats,
    parse_endpoint,
    read_pcap,
)
from testbed_fidelity.stats_compare import SampleSet, confidence_interval, similarity
from testbed_fidelity.trace_model import CallSequence, load_sequence, read_trace, summarize_reads
from testbed_fidelity.workload_metrics import (
    Level,
    jitter,
    normalize_per_request,
    read_ab_output,
    read_delay_csv,
)

log = logging.getLogger(__name__)

RUN_PATH_KEYS = ("client_trace", "server_trace", "pcap", "ab_output", "delay_csv")
RUN_KEYS = RUN_PATH_KEYS + ("client_process", "server_process", "server_endpoint", "payload", "link")

METRICS = (
    ("requests_per_sec", Level.APPLICATION),
    ("reads_per_request", Level.OS),
    ("bytes_per_request", Level.NETWORK),
    ("packets_per_request", Level.NETWORK),
    ("jitter_ms", Level.NETWORK),
)


@dataclass(frozen=True)
class RunSpec:
    run_id: str
    client_trace: Path
    server_trace: Path
    pcap: Path
    ab_output: Path
    delay_csv: Path
    client_process: str
    server_process: str
    server_endpoint: Tuple[str, int]
    payload: str
    link: str

    @property
    def cell(self) -> Tuple[str, str]:
        return (self.payload, self.link)


@dataclass(frozen=True)
class CampaignManifest:
    campaign_id: str
    runs: Tuple[RunSpec, ...]
    digest: str = ""


_SECTION = re.compile(r"^\[\s*([A-Za-z_]+)\s*\]$")


def parse_manifest(text: str, base_dir: Path = Path("."), check_paths: bool = True) -> CampaignManifest:
    """Parse an INI-style manifest: one ``[campaign]`` section, one ``[run]`` section per run.

    Keys in ``[campaign]`` other than ``id`` are defaults for every run.
    Relative paths are resolved against ``base_dir``.
    """
    campaign: Dict[str, str] = {}
    runs: List[Dict[str, str]] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = _SECTION.match(line)
        if m:
            name = m.group(1).lower()
            if name == "campaign":
                current = campaign
            elif name == "run":
                current = {"__line__": str(lineno)}
                runs.append(current)
            else:
                raise ManifestError(f"line {lineno}: unknown section [{name}]")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ManifestError(f"line {lineno}: expected 'key = value'")
        if current is None:
            raise ManifestError(f"line {lineno}: key outside of any section")
        key = key.strip().lower()
        if key in current:
            raise ManifestError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip()

    cid = campaign.get("id")
    if not cid:
        raise ManifestError("manifest lacks [campaign] id")
    if not runs:
        raise ManifestError(f"campaign {cid!r} has no [run] sections")
    specs = []
    seen = set()
    for r in runs:
        where = f"run at line {r['__line__']}"
        merged = {k: v for k, v in campaign.items() if k != "id"}
        merged.update({k: v for k, v in r.items() if k != "__line__"})
        run_id = merged.pop("run_id", None)
        if not run_id:
            raise ManifestError(f"{where}: missing run_id")
        if run_id in seen:
            raise ManifestError(f"duplicate run_id {run_id!r}")
        seen.add(run_id)
        missing = [k for k in RUN_KEYS if not merged.get(k)]
        if missing:
            raise ManifestError(f"run {run_id!r}: missing {', '.join(missing)}")
        unknown = sorted(set(merged) - set(RUN_KEYS))
        if unknown:
            raise ManifestError(f"run {run_id!r}: unknown keys {', '.join(unknown)}")
        paths = {}
        for k in RUN_PATH_KEYS:
            p = Path(merged[k])
            p = p if p.is_absolute() else base_dir / p
            if check_paths and not p.exists():
                raise ManifestError(f"run {run_id!r}: {k} {p} does not exist")
            paths[k] = p
        try:
            endpoint = parse_endpoint(merged["server_endpoint"])
        except ValueError as exc:
            raise ManifestError(f"run {run_id!r}: {exc}") from None
        specs.append(
            RunSpec(
                run_id=run_id,
                server_endpoint=endpoint,
                client_process=merged["client_process"],
                server_process=merged["server_process"],
                payload=merged["payload"],
                link=merged["link"],
                **paths,
            )
        )
    return CampaignManifest(cid, tuple(specs), hashlib.sha256(text.encode("utf-8")).hexdigest())


def load_manifest(path) -> CampaignManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    return parse_manifest(text, base_dir=path.parent)


@dataclass(frozen=True)
class CompareOptions:
    order: int = 1
    prune_threshold: float = 0.001
    skip: int = 1_000_000
    limit: int = 2_000_000
    similarity_threshold: float = 0.10
    process: str = "client"
    exclude: FrozenSet[str] = frozenset()

    def as_dict(self):
        d = asdict(self)
        d["exclude"] = sorted(self.exclude)
        return d


@dataclass
class RunResult:
    run_id: str
    cell: Tuple[str, str]
    metrics: Dict[str, float]
    sequence: CallSequence


def analyze_run(run: RunSpec, process: str = "client") -> RunResult:
    """Per-run totals normalised by completed requests, plus the call sequence for chain analysis."""
    ab = read_ab_output(run.ab_output, run.payload)
    client_events = list(read_trace(run.client_trace))
    reads = summarize_reads(client_events, run.client_process)
    flows = assemble_flows(read_pcap(run.pcap))
    fstats = experiment_stats(flows, run.server_endpoint)
    delays = read_delay_csv(run.delay_csv)

    values = {
        "requests_per_sec": ab.requests_per_sec,
        "reads_per_request": normalize_per_request(reads.read_calls, ab, "reads_per_request", Level.OS).value_per_request,
        "bytes_per_request": normalize_per_request(
            fstats.server_to_client_bytes, ab, "bytes_per_request", Level.NETWORK
        ).value_per_request,
        "packets_per_request": normalize_per_request(
            fstats.total_packets, ab, "packets_per_request", Level.NETWORK
        ).value_per_request,
        "jitter_ms": jitter(delays),
    }
    if process == "client":
        seq = load_sequence(client_events, run.client_process, run.run_id)
    else:
        seq = load_sequence(read_trace(run.server_trace), run.server_process, run.run_id)
    return RunResult(run.run_id, run.cell, values, seq)


def _analyze_campaign(manifest: CampaignManifest, opts: CompareOptions):
    results: List[RunResult] = []
    status = []
    for run in manifest.runs:
        if run.run_id in opts.exclude:
            status.append({"run_id": run.run_id, "status": "excluded", "reason": "listed in --exclude"})
            continue
        try:
            res = analyze_run(run, opts.process)
            if len(res.sequence) < opts.order + 1:
                raise FidelityError(f"{opts.process} sequence has only {len(res.sequence)} calls")
        except (FidelityError, OSError) as exc:
            log.warning("excluding run %s: %s", run.run_id, exc)
            status.append({"run_id": run.run_id, "status": "excluded", "reason": f"{type(exc).__name__}: {exc}"})
            continue
        results.append(res)
        status.append({"run_id": run.run_id, "status": "included", "reason": None})
    return results, status


def _ci_dict(values):
    ci = confidence_interval(SampleSet("", values))
    return {"n": len(values), "mean": ci.mean, "ci95_half_width": ci.half_width, "values": list(values)}


def _metric_row(name, level, base_vals, cand_vals, threshold):
    row = {"metric": name, "level": level.value, "baseline": None, "candidate": None, "verdict": None, "note": None}
    try:
        row["baseline"] = _ci_dict(base_vals)
        row["candidate"] = _ci_dict(cand_vals)
        v = similarity(SampleSet(name, base_vals), SampleSet(name, cand_vals), threshold)
        row["verdict"] = {
            "relative_diff": v.relative_diff,
            "similar": v.similar,
            "ci_overlap": v.ci_overlap,
            "threshold": v.threshold,
        }
    except (TooFewSamples, ZeroBaselineMean) as exc:
        row["note"] = f"{type(exc).__name__}: {exc}"
    return row


def _walk_variant(chains_models, seqs_by_class, skip, limit):
    """Walk every baseline-run chain with every sequence cut to one common length."""
    usable = {}
    short = []
    for cls, seqs in seqs_by_class.items():
        usable[cls] = []
        for s in seqs:
            if len(s) > skip:
                usable[cls].append(s)
            else:
                short.append(s.source_id)
    lengths = [len(s) - skip for ss in usable.values() for s in ss]
    if not lengths:
        return {"skip": skip, "length": 0, "too_short": sorted(short), "classes": {}}
    length = min([limit] + lengths)
    out = {"skip": skip, "length": length, "too_short": sorted(short), "classes": {}}
    mean_log = {}
    for cls, seqs in usable.items():
        matrix = np.zeros((len(chains_models), len(seqs)), dtype=np.int64)
        logs = []
        for i, model in enumerate(chains_models):
            model.set_params(skip=skip, limit=length)
            for j, w in enumerate(model.walk(seqs)):
                matrix[i, j] = w.n_invalid
                if w.valid:
                    logs.append(w.log10_prob)
        mean_log[cls] = float(np.mean(logs)) if logs else None
        out["classes"][cls] = {
            "sequences": [s.source_id for s in seqs],
            "walks": int(matrix.size),
            "invalid_transitions": int(matrix.sum()),
            "walks_with_invalid": int((matrix > 0).sum()),
            "invalid_matrix": matrix.tolist(),
            "valid_walks": len(logs),
            "mean_log10_prob": mean_log[cls],
        }
    base = mean_log.get("baseline")
    for cls, info in out["classes"].items():
        m = mean_log[cls]
        info["relative_log10"] = None if m is None or base is None else m - base
    return out


def _edge_set(chain):
    return {(src, dst) for src, dst, _, _ in chain.arcs()}


def _markov_section(base_res, cand_res, opts, cell, dot_graphs, ids):
    sec = {"process": opts.process, "order": opts.order, "prune_threshold": opts.prune_threshold}
    if not base_res:
        sec["note"] = "no included baseline runs"
        return sec
    models = [SyscallChainModel(order=opts.order).fit([r.sequence]) for r in base_res]
    seqs = {"baseline": [r.sequence for r in base_res], "candidate": [r.sequence for r in cand_res]}
    sec["no_skip"] = _walk_variant(models, seqs, 0, opts.limit)
    sec["skip"] = _walk_variant(models, seqs, opts.skip, opts.limit)

    merged = {}
    for cls, res in (("baseline", base_res), ("candidate", cand_res)):
        if not res:
            continue
        model = SyscallChainModel(order=opts.order, prune_threshold=opts.prune_threshold)
        chain = model.fit([r.sequence for r in res]).chain_
        merged[cls] = chain
        name = f"chain_{_slug(ids[cls])}_{_slug(cell[0])}_{_slug(cell[1])}"
        dot_graphs[name] = markov.to_dot(chain, name=name)
    summary = {cls: {"nodes": len(c), "arcs": c.n_arcs} for cls, c in merged.items()}
    if len(merged) == 2:
        eb, ec = _edge_set(merged["baseline"]), _edge_set(merged["candidate"])
        union = eb | ec
        summary["edge_disagreement"] = len(eb ^ ec) / len(union) if union else 0.0
    sec["merged_chains"] = summary
    return sec


def _slug(s):
    return re.sub(r"[^A-Za-z0-9]+", "-", s).strip("-") or "x"


@dataclass
class ComparisonReport:
    data: dict
    dot_graphs: Dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, allow_nan=False) + "\n"


def run_compare(baseline: CampaignManifest, candidate: CampaignManifest, options: Optional[CompareOptions] = None) -> ComparisonReport:
    opts = options or CompareOptions()
    for m in (baseline, candidate):
        if not m.runs:
            raise ManifestError(f"campaign {m.campaign_id!r} has no runs")
    base_res, base_status = _analyze_campaign(baseline, opts)
    cand_res, cand_status = _analyze_campaign(candidate, opts)
    ids = {"baseline": baseline.campaign_id, "candidate": candidate.campaign_id}

    cells = sorted({r.cell for r in baseline.runs} | {r.cell for r in candidate.runs})
    dot_graphs: Dict[str, str] = {}
    cell_rows = []
    for cell in cells:
        b = [r for r in base_res if r.cell == cell]
        c = [r for r in cand_res if r.cell == cell]
        rows = [
            _metric_row(
                name, level,
                [r.metrics[name] for r in b], [r.metrics[name] for r in c],
                opts.similarity_threshold,
            )
            for name, level in METRICS
        ]
        cell_rows.append(
            {
                "payload": cell[0],
                "link": cell[1],
                "metrics": rows,
                "markov": _markov_section(b, c, opts, cell, dot_graphs, ids),
            }
        )

    data = {
        "provenance": {
            "tool": "testbed-fidelity",
            "version": __version__,
            "baseline": {"campaign_id": baseline.campaign_id, "manifest_sha256": baseline.digest},
            "candidate": {"campaign_id": candidate.campaign_id, "manifest_sha256": candidate.digest},
            "options": opts.as_dict(),
        },
        "runs": {"baseline": base_status, "candidate": cand_status},
        "cells": cell_rows,
    }
    return ComparisonReport(data, dot_graphs)


def _fmt(x):
    return "" if x is None else repr(x)


def _metric_csv(report: ComparisonReport, metric: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([
        "payload", "link", "baseline_n", "baseline_mean", "baseline_ci95_half_width",
        "candidate_n", "candidate_mean", "candidate_ci95_half_width",
        "relative_diff", "similar", "ci_overlap",
    ])
    for cell in report.data["cells"]:
        row = next(r for r in cell["metrics"] if r["metric"] == metric)
        b, c, v = row["baseline"] or {}, row["candidate"] or {}, row["verdict"] or {}
        w.writerow([
            cell["payload"], cell["link"],
            b.get("n", ""), _fmt(b.get("mean")), _fmt(b.get("ci95_half_width")),
            c.get("n", ""), _fmt(c.get("mean")), _fmt(c.get("ci95_half_width")),
            _fmt(v.get("relative_diff")), _fmt(v.get("similar")), _fmt(v.get("ci_overlap")),
        ])
    return buf.getvalue()


def _markov_csvs(report: ComparisonReport) -> Dict[str, str]:
    inv, rel = io.StringIO(), io.StringIO()
    wi = csv.writer(inv, lineterminator="\n")
    wr = csv.writer(rel, lineterminator="\n")
    wi.writerow(["payload", "link", "sequence_class", "walks", "invalid_no_skip", "invalid_skip"])
    wr.writerow(["payload", "link", "sequence_class", "relative_log10_no_skip", "relative_log10_skip"])
    for cell in report.data["cells"]:
        mk = cell["markov"]
        if "no_skip" not in mk:
            continue
        ns, sk = mk["no_skip"]["classes"], mk["skip"]["classes"]
        for cls in ("baseline", "candidate"):
            a, b = ns.get(cls, {}), sk.get(cls, {})
            wi.writerow([cell["payload"], cell["link"], cls, a.get("walks", 0),
                         a.get("invalid_transitions", ""), b.get("invalid_transitions", "")])
            if cls != "baseline":
                wr.writerow([cell["payload"], cell["link"], cls,
                             _fmt(a.get("relative_log10")), _fmt(b.get("relative_log10"))])
    return {"markov_invalid.csv": inv.getvalue(), "markov_relative.csv": rel.getvalue()}


FORMATS = ("json", "csv", "dot")


def emit(report: ComparisonReport, out_dir, formats=FORMATS) -> List[Path]:
    """Write the report files and return their paths in write order."""
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown formats: {', '.join(sorted(unknown))}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: Dict[str, str] = {}
    if "json" in formats:
        files["report.json"] = report.to_json()
    if "csv" in formats:
        for name, _ in METRICS:
            files[f"{name}.csv"] = _metric_csv(report, name)
        files.update(_markov_csvs(report))
    if "dot" in formats:
        for name in sorted(report.dot_graphs):
            files[f"{name}.dot"] = report.dot_graphs[name]
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    return written


def summary_table(report: ComparisonReport) -> str:
    """Human-readable digest of the verdicts."""
    lines = []
    for cell in report.data["cells"]:
        lines.append(f"== {cell['payload']} / {cell['link']} ==")
        for row in cell["metrics"]:
            if row["verdict"] is None:
                lines.append(f"  {row['metric']:<22} n/a ({row['note']})")
                continue
            b, c, v = row["baseline"], row["candidate"], row["verdict"]
            lines.append(
                f"  {row['metric']:<22} {b['mean']:>12.4g} ± {b['ci95_half_width']:<10.3g}"
                f" {c['mean']:>12.4g} ± {c['ci95_half_width']:<10.3g}"
                f" diff {100 * v['relative_diff']:6.2f}%  {'similar' if v['similar'] else 'DIFFERENT'}"
            )
        mk = cell["markov"]
        for variant in ("no_skip", "skip"):
            if variant not in mk:
                continue
            for cls, info in mk[variant]["classes"].items():
                rel = info["relative_log10"]
                rel_s = "n/a" if rel is None else f"{rel:+.3f}"
                lines.append(
                    f"  markov[{variant}] {cls:<9} invalid {info['invalid_transitions']:>6}"
                    f" / {info['walks']} walks  relative log10 {rel_s}"
                )
    excluded = [
        f"{side}:{r['run_id']} ({r['reason']})"
        for side, rs in report.data["runs"].items() for r in rs if r["status"] == "excluded"
    ]
    if excluded:
        lines.append("excluded runs: " + "; ".join(excluded))
    return "\n".join(lines) + "\n"


__all__ = [
    "CampaignManifest",
    "ComparisonReport",
    "CompareOptions",
    "RunSpec",
    "analyze_run",
    "emit",
    "load_manifest",
    "parse_manifest",
    "run_compare",
    "summary_table",
]
