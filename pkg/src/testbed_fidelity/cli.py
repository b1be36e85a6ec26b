"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from testbed_fidelity import __version__, markov, oracle_synth
from testbed_fidelity.errors import FidelityError
from testbed_fidelity.pcap_flows import (
    PcapReader,
    assemble_flows,
    experiment_stats,
    parse_endpoint,
    write_flows_csv,
)
from testbed_fidelity.report import CompareOptions, emit, load_manifest, run_compare, summary_table
from testbed_fidelity.trace_model import load_sequence, read_trace, slice_sequence, summarize_reads
from testbed_fidelity.workload_metrics import Level, jitter, normalize_per_request, read_ab_output, read_delay_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("testbed_fidelity")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _probability(text):
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1)")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


def _endpoint(text):
    try:
        return parse_endpoint(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _formats(text):
    fmts = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fmts if f not in ("json", "csv", "dot")]
    if bad or not fmts:
        raise argparse.ArgumentTypeError(f"formats must be drawn from json,csv,dot; got {text!r}")
    return fmts


def _write_out(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_build_chain(args):
    chains = []
    for path in args.traces:
        seq = load_sequence(read_trace(path, strict=not args.lenient), args.process, str(path))
        chains.append(markov.build_chain(seq, args.order))
    chain = markov.merge_chains(chains)
    if args.prune_threshold:
        chain = markov.prune(chain, args.prune_threshold)
    _write_out(args.out, markov.dumps(chain))
    if args.dot:
        Path(args.dot).write_text(markov.to_dot(chain), encoding="utf-8")
    return EXIT_OK


def cmd_walk(args):
    chain = markov.loads(Path(args.chain).read_text(encoding="utf-8"))
    print("source\tlength\ttransitions\tinvalid\tlog10_prob")
    for path in args.traces:
        seq = load_sequence(read_trace(path, strict=not args.lenient), args.process, str(path))
        if args.skip or args.limit is not None:
            seq = slice_sequence(seq, args.skip, args.limit)
        w = markov.walk(chain, seq)
        prob = "" if w.log10_prob is None else repr(w.log10_prob)
        print(f"{path}\t{w.sequence_length}\t{w.transitions}\t{w.n_invalid}\t{prob}")
        if args.list_invalid:
            for rec in w.invalid_transitions:
                print(f"#\tinvalid at {rec.position}: {rec.from_label} -> {rec.to_label}")
    return EXIT_OK


def cmd_flows(args):
    with open(args.pcap, "rb") as fh:
        reader = PcapReader(fh, strict=not args.lenient)
        flows = assemble_flows(reader)
    if args.csv in (None, "-"):
        write_flows_csv(flows, sys.stdout)
    else:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            write_flows_csv(flows, fh)
    stats = asdict(experiment_stats(flows, args.server))
    stats["skipped_packets"] = reader.skipped
    stats["truncated_packets"] = reader.truncated
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    else:
        print(json.dumps(stats), file=sys.stderr)
    return EXIT_OK


def cmd_metrics(args):
    ab = read_ab_output(args.ab)
    rows = [("requests_per_sec", Level.APPLICATION.value, ab.requests_per_sec)]
    if args.trace:
        if not args.process:
            return _usage("--trace needs --process")
        r = summarize_reads(read_trace(args.trace), args.process)
        rows.append(("reads_per_request", Level.OS.value,
                     normalize_per_request(r.read_calls, ab, "reads", Level.OS).value_per_request))
        rows.append(("bytes_read_per_request", Level.OS.value,
                     normalize_per_request(r.bytes_read, ab, "bytes_read", Level.OS).value_per_request))
    if args.pcap:
        with open(args.pcap, "rb") as fh:
            flows = assemble_flows(PcapReader(fh))
        st = experiment_stats(flows, args.server)
        rows.append(("packets_per_request", Level.NETWORK.value,
                     normalize_per_request(st.total_packets, ab, "packets", Level.NETWORK).value_per_request))
        if args.server:
            rows.append(("bytes_per_request", Level.NETWORK.value,
                         normalize_per_request(st.server_to_client_bytes, ab, "bytes", Level.NETWORK).value_per_request))
    if args.delays:
        rows.append(("jitter_ms", Level.NETWORK.value, jitter(read_delay_csv(args.delays))))
    print("metric,level,value")
    for name, level, value in rows:
        print(f"{name},{level},{value!r}")
    return EXIT_OK


def _usage(msg):
    print(f"testbed-fidelity: error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def cmd_compare(args):
    opts = CompareOptions(
        order=args.order,
        prune_threshold=args.prune_threshold,
        skip=args.skip,
        limit=args.limit,
        similarity_threshold=args.similarity_threshold,
        process=args.process,
        exclude=frozenset(x for x in (args.exclude or "").split(",") if x),
    )
    report = run_compare(load_manifest(args.baseline), load_manifest(args.candidate), opts)
    sys.stdout.write(summary_table(report))
    if args.out:
        for p in emit(report, args.out, args.format):
            log.info("wrote %s", p)
    return EXIT_OK


def cmd_synth_campaign(args):
    path = oracle_synth.synth_campaign(
        args.out, args.id, runs=args.runs, seed=args.seed, length=args.length,
        perturb=args.perturb, prefix_calls=args.prefix_calls,
        payload_bytes=args.payload_bytes, payload_label=args.payload, link_label=args.link,
    )
    print(path)
    return EXIT_OK


def cmd_synth_trace(args):
    if args.chain:
        chain = markov.loads(Path(args.chain).read_text(encoding="utf-8"))
    else:
        chain = oracle_synth.search_chain_model() if args.builtin == "search" else oracle_synth.client_chain()
    prefix = tuple(oracle_synth.INIT_CALLS[i % len(oracle_synth.INIT_CALLS)] for i in range(args.prefix_calls))
    res = oracle_synth.synth_trace(
        chain, args.length, args.seed, args.process, args.out, prefix=prefix, restart_on_dead_end=args.restart,
    )
    print(json.dumps({"calls": len(res.sequence), "read_calls": res.reads.read_calls,
                      "bytes_read": res.reads.bytes_read, "truncated": res.sequence.truncated}))
    return EXIT_OK


def cmd_synth_pcap(args):
    rng = np.random.default_rng(args.seed)
    specs = oracle_synth.random_flow_specs(rng, args.max_flows, args.max_segments, args.max_duplicates)
    res = oracle_synth.synth_pcap(specs, args.seed, args.out, noise_packets=args.noise, vlan=args.vlan)
    print(json.dumps({
        "flows": [asdict(f) for f in res.flows],
        "stats": res.expected_stats(("10.0.0.2", 80)),
        "skipped_packets": res.skipped_packets,
    }, indent=2))
    return EXIT_OK


def cmd_synth_ab(args):
    oracle_synth.synth_ab(args.completed, args.duration, args.transferred, args.out, args.concurrency)
    return EXIT_OK


def cmd_synth_delays(args):
    oracle_synth.synth_delays(args.n, args.seed, args.out, clock_offset_ms=args.clock_offset_ms)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="testbed-fidelity", description="Compare two testbed campaigns from recorded artifacts.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-chain", help="build a Markov chain from one or more traces")
    s.add_argument("traces", nargs="+")
    s.add_argument("--process", required=True, help="process name to follow")
    s.add_argument("--order", type=_pos_int, default=1)
    s.add_argument("--prune-threshold", type=_probability, default=0.0)
    s.add_argument("--out", help="chain file (default: stdout)")
    s.add_argument("--dot", help="also write DOT here")
    s.add_argument("--lenient", action="store_true", help="skip malformed trace lines")
    s.set_defaults(func=cmd_build_chain)

    s = sub.add_parser("walk", help="walk a saved chain with trace sequences")
    s.add_argument("chain")
    s.add_argument("traces", nargs="+")
    s.add_argument("--process", required=True)
    s.add_argument("--skip", type=_nonneg_int, default=0)
    s.add_argument("--limit", type=_nonneg_int, default=None)
    s.add_argument("--lenient", action="store_true")
    s.add_argument("--list-invalid", action="store_true", help="list every invalid transition")
    s.set_defaults(func=cmd_walk)

    s = sub.add_parser("flows", help="per-flow TCP statistics of a pcap")
    s.add_argument("pcap")
    s.add_argument("--server", type=_endpoint, help="server ip:port for server-to-client bytes")
    s.add_argument("--csv", help="per-flow CSV (default: stdout)")
    s.add_argument("--stats", help="experiment totals as JSON (default: stderr)")
    s.add_argument("--lenient", action="store_true", help="count truncated packets instead of failing")
    s.set_defaults(func=cmd_flows)

    s = sub.add_parser("metrics", help="per-request metrics of one run")
    s.add_argument("--ab", required=True, help="ApacheBench output")
    s.add_argument("--trace")
    s.add_argument("--process")
    s.add_argument("--pcap")
    s.add_argument("--server", type=_endpoint)
    s.add_argument("--delays", help="delay CSV (send_ts_ns,delay_ms)")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("compare", help="compare a candidate campaign against a baseline")
    s.add_argument("baseline", help="baseline manifest")
    s.add_argument("candidate", help="candidate manifest")
    s.add_argument("--order", type=_pos_int, default=1)
    s.add_argument("--prune-threshold", type=_probability, default=0.001)
    s.add_argument("--skip", type=_nonneg_int, default=1_000_000)
    s.add_argument("--limit", type=_nonneg_int, default=2_000_000)
    s.add_argument("--similarity-threshold", type=float, default=0.10)
    s.add_argument("--process", choices=("client", "server"), default="client")
    s.add_argument("--exclude", help="comma-separated run ids to drop")
    s.add_argument("--out", help="directory for report files")
    s.add_argument("--format", type=_formats, default=["json", "csv", "dot"])
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("synth", help="generate synthetic ground-truth artifacts")
    ss = s.add_subparsers(dest="kind", required=True, parser_class=_Parser)

    c = ss.add_parser("campaign")
    c.add_argument("--out", required=True)
    c.add_argument("--id", required=True)
    c.add_argument("--runs", type=_pos_int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--length", type=_pos_int, default=5000)
    c.add_argument("--perturb", type=_probability, default=0.0)
    c.add_argument("--prefix-calls", type=_nonneg_int, default=0)
    c.add_argument("--payload-bytes", type=_pos_int, default=500)
    c.add_argument("--payload", default="500B")
    c.add_argument("--link", default="1Gbps")
    c.set_defaults(func=cmd_synth_campaign)

    c = ss.add_parser("trace")
    c.add_argument("--out", required=True)
    c.add_argument("--chain", help="chain file; default is a built-in chain")
    c.add_argument("--builtin", choices=("search", "client"), default="client")
    c.add_argument("--length", type=_pos_int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--process", default="ab")
    c.add_argument("--prefix-calls", type=_nonneg_int, default=0)
    c.add_argument("--restart", action="store_true", help="restart from the start node at a dead end")
    c.set_defaults(func=cmd_synth_trace)

    c = ss.add_parser("pcap")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-flows", type=_pos_int, default=10)
    c.add_argument("--max-segments", type=_nonneg_int, default=100)
    c.add_argument("--max-duplicates", type=_nonneg_int, default=10)
    c.add_argument("--noise", type=_nonneg_int, default=0, help="non-TCP packets to mix in")
    c.add_argument("--vlan", type=int, default=None)
    c.set_defaults(func=cmd_synth_pcap)

    c = ss.add_parser("ab")
    c.add_argument("--out", required=True)
    c.add_argument("--completed", type=_pos_int, required=True)
    c.add_argument("--duration", type=float, required=True)
    c.add_argument("--transferred", type=_nonneg_int, required=True)
    c.add_argument("--concurrency", type=_pos_int, default=10)
    c.set_defaults(func=cmd_synth_ab)

    c = ss.add_parser("delays")
    c.add_argument("--out", required=True)
    c.add_argument("--n", type=_pos_int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--clock-offset-ms", type=float, default=0.0)
    c.set_defaults(func=cmd_synth_delays)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FidelityError, OSError) as exc:
        print(f"testbed-fidelity: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
