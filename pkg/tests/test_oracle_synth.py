from fractions import Fraction

import numpy as np
import pytest

from testbed_fidelity.errors import DeadEndWarning, InvalidTransition, SpecError
from testbed_fidelity.markov import build_chain, generate, walk
from testbed_fidelity.oracle_synth import (
    CLIENT_WEIGHTS,
    INIT_CALLS,
    FlowSpec,
    Segment,
    chain_from_weights,
    client_chain,
    exact_walk,
    perturb_chain,
    random_flow_specs,
    server_chain,
    synth_ab,
    synth_campaign,
    synth_delays,
    synth_pcap,
    synth_trace,
)
from testbed_fidelity.pcap_flows import PcapReader, assemble_flows, experiment_stats, read_pcap
from testbed_fidelity.report import load_manifest
from testbed_fidelity.trace_model import load_sequence, read_trace, summarize_reads
from testbed_fidelity.workload_metrics import read_ab_output, read_delay_csv

C, S = ("10.0.0.1", 40000), ("10.0.0.2", 80)


def test_exact_walk_search_example(search_chain):
    assert exact_walk(search_chain, ["open", "read", "read", "read"]).probability == Fraction(891, 1600)
    assert exact_walk(search_chain, ["open", "error"]).probability == Fraction(1, 100)
    assert exact_walk(search_chain, ["open"]).probability == 1


def test_exact_walk_invalid(search_chain):
    o = exact_walk(search_chain, ["open", "close", "open"])
    assert o.invalid_transitions == 2 and o.probability == 0
    with pytest.raises(InvalidTransition):
        o.log10()


def test_exact_walk_refuses_long_sequences(search_chain):
    with pytest.raises(ValueError):
        exact_walk(search_chain, ["read"] * 1002)


def test_synth_trace_roundtrip(tmp_path, search_chain):
    syn = synth_trace(search_chain, 100, 7, "grep", tmp_path / "t.trace", restart_on_dead_end=True)
    assert len(syn.sequence) == 100
    assert load_sequence(read_trace(tmp_path / "t.trace"), "grep").calls == syn.sequence.calls
    assert syn.sequence.calls == generate(search_chain, 100, 7, restart_on_dead_end=True).calls


def test_synth_trace_dead_end_propagates(tmp_path, search_chain):
    with pytest.warns(DeadEndWarning):
        syn = synth_trace(search_chain, 100, 7, "grep", tmp_path / "t.trace")
    assert syn.sequence.truncated


def test_synth_trace_self_loop(tmp_path):
    synth_trace(build_chain(["A", "A"]), 3, 0, "p", tmp_path / "t.trace", background=())
    enter = [l for l in (tmp_path / "t.trace").read_text().splitlines() if " > " in l]
    assert len(enter) == 3 and all(l.endswith("> A fd=3") for l in enter)


def test_synth_trace_reads_and_gzip(tmp_path):
    syn = synth_trace(client_chain(), 2000, 3, "ab", tmp_path / "t.trace.gz", prefix=INIT_CALLS)
    trace = list(read_trace(tmp_path / "t.trace.gz"))
    assert summarize_reads(trace, "ab") == syn.reads
    assert syn.sequence.calls[: len(INIT_CALLS)] == INIT_CALLS


def test_seeds_differ():
    a = generate(client_chain(), 50, 1).calls
    b = generate(client_chain(), 50, 2).calls
    assert a != b


def test_chain_from_weights_counts():
    ch = chain_from_weights(CLIENT_WEIGHTS)
    assert ch.count(("read",), ("read",)) == 550
    assert ch.weight(("poll",), ("write",)) == pytest.approx(0.4)
    assert all(w >= 0.05 for *_, w in ch.arcs())


def test_perturb_keeps_topology():
    ch = server_chain()
    p = perturb_chain(ch, 0.3, seed=4)
    assert {(s, d) for s, d, *_ in p.arcs()} == {(s, d) for s, d, *_ in ch.arcs()}
    assert p != ch


def test_pcap_two_segments_closed_form(tmp_path):
    spec = FlowSpec(C, S, (Segment("s2c", 1000), Segment("s2c", 1000)))
    exp = spec.expected()
    # handshake 2+1, two data segments each acked, four teardown packets
    assert (exp["c2s_packets"], exp["s2c_packets"]) == (2 + 2 + 2, 1 + 2 + 2)
    synth_pcap([spec], 1, tmp_path / "c.pcap")
    (f,) = assemble_flows(read_pcap(tmp_path / "c.pcap"))
    assert (f.packets_a2b, f.packets_b2a) == (6, 5)


def test_pcap_duplicate_segment(tmp_path):
    spec = FlowSpec(C, S, (Segment("s2c", 1000, True), Segment("s2c", 1000)))
    syn = synth_pcap([spec], 2, tmp_path / "c.pcap")
    assert syn.expected_stats(S)["total_retransmitted_bytes"] == 1000
    s = experiment_stats(assemble_flows(read_pcap(tmp_path / "c.pcap")), S)
    assert s.total_retransmitted_bytes == 1000 and s.server_to_client_bytes == 3000


def test_pcap_empty(tmp_path):
    syn = synth_pcap([], 0, tmp_path / "e.pcap")
    assert (tmp_path / "e.pcap").stat().st_size == 24
    assert syn.flows == [] and read_pcap(tmp_path / "e.pcap") == []


def test_pcap_options(tmp_path):
    specs = random_flow_specs(np.random.default_rng(5), max_flows=3, max_segments=20)
    syn = synth_pcap(specs, 5, tmp_path / "c.pcap", noise_packets=7, vlan=12, big_endian=True)
    with open(tmp_path / "c.pcap", "rb") as fh:
        r = PcapReader(fh)
        pkts = list(r)
    assert len(pkts) == syn.tcp_packets and r.skipped == 7


@pytest.mark.parametrize(
    "spec",
    [
        FlowSpec(C, C),
        FlowSpec(("10.0.0.300", 1), S),
        FlowSpec(C, ("10.0.0.2", 0)),
        FlowSpec(C, S, (Segment("up", 10),)),
        FlowSpec(C, S, (Segment("c2s", 0),)),
    ],
)
def test_bad_specs(tmp_path, spec):
    with pytest.raises(SpecError):
        synth_pcap([spec], 0, tmp_path / "x.pcap")


def test_duplicate_endpoint_pairs_rejected(tmp_path):
    with pytest.raises(SpecError):
        synth_pcap([FlowSpec(C, S), FlowSpec(S, C)], 0, tmp_path / "x.pcap")


def test_pcap_deterministic(tmp_path):
    specs = random_flow_specs(np.random.default_rng(9))
    synth_pcap(specs, 9, tmp_path / "a.pcap")
    synth_pcap(specs, 9, tmp_path / "b.pcap")
    assert (tmp_path / "a.pcap").read_bytes() == (tmp_path / "b.pcap").read_bytes()


def test_ab_and_delay_files(tmp_path):
    ab = synth_ab(1297800, 90.0, 10**9, tmp_path / "ab.txt")
    assert read_ab_output(tmp_path / "ab.txt").completed_requests == ab.completed_requests
    d = synth_delays(50, 3, tmp_path / "d.csv", clock_offset_ms=-5000.0)
    assert read_delay_csv(tmp_path / "d.csv") == d
    assert all(s.one_way_delay_ms < 0 for s in d)


def test_campaign_layout_and_determinism(tmp_path):
    m1 = synth_campaign(tmp_path / "a", "a", runs=2, seed=3, length=300, delay_samples=20)
    m2 = synth_campaign(tmp_path / "b", "a", runs=2, seed=3, length=300, delay_samples=20)
    man = load_manifest(m1)
    assert [r.run_id for r in man.runs] == ["run01", "run02"]
    for name in ("client.trace", "server.trace", "capture.pcap", "ab.txt", "delays.csv"):
        assert (m1.parent / "run01" / name).read_bytes() == (m2.parent / "run01" / name).read_bytes()
    seq = load_sequence(read_trace(m1.parent / "run01" / "client.trace"), "ab")
    ab = read_ab_output(m1.parent / "run01" / "ab.txt")
    assert ab.completed_requests == seq.calls.count("connect")
    assert len(assemble_flows(read_pcap(m1.parent / "run01" / "capture.pcap"))) == ab.completed_requests
    assert walk(client_chain(), seq.calls).valid


@pytest.mark.parametrize("seed", range(20))
def test_perturb_moves_every_branching_node(seed):
    ch = client_chain()
    p = perturb_chain(ch, 0.3, seed)
    for src, row in ch.counts().items():
        if len(row) > 1:
            assert any(abs(p.weight(src, d) - ch.weight(src, d)) > 0.01 for d in row)
