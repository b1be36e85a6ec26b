import io
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from testbed_fidelity.errors import (
    BadMagic,
    TruncatedHeader,
    TruncatedPacket,
    UnknownServerEndpoint,
    UnsupportedLinkType,
)
from testbed_fidelity.oracle_synth import FlowSpec, Segment, brute_force_flow_totals, synth_pcap
from testbed_fidelity.pcap_flows import (
    CSV_HEADER,
    FlowKey,
    PacketRecord,
    PcapReader,
    TcpFlag,
    assemble_flows,
    experiment_stats,
    parse_endpoint,
    read_pcap,
    write_flows_csv,
)

CLIENT = ("10.0.0.1", 40000)
SERVER = ("10.0.0.2", 80)


# a deliberately small writer, independent of the synthesiser


def frame(src, dst, seq=0, payload=0, flags=0x18, pad=0, vlan=False):
    tcp = struct.pack("!HHIIBBHHH", src[1], dst[1], seq, 0, 0x50, flags, 1000, 0, 0)
    ip = struct.pack("!BBHHHBBH", 0x45, 0, 40 + payload, 0, 0, 64, 6, 0)
    ip += bytes(int(x) for x in src[0].split(".")) + bytes(int(x) for x in dst[0].split("."))
    eth = b"\x00" * 12 + (b"\x81\x00\x00\x05" if vlan else b"") + b"\x08\x00"
    return eth + ip + tcp + bytes(payload) + bytes(pad)


def arp():
    return b"\x00" * 12 + b"\x08\x06" + bytes(28)


def pcap(frames, endian="<", magic=0xA1B2C3D4, linktype=1):
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)
    for i, f in enumerate(frames):
        out += struct.pack(endian + "IIII", 100, i, len(f), len(f)) + f
    return out


def read(data, strict=True):
    r = PcapReader(io.BytesIO(data), strict=strict)
    return list(r), r


def pkt(src, dst, seq, payload, flags=TcpFlag.ACK, ts=0):
    return PacketRecord(ts, 0, 0, src[0], dst[0], src[1], dst[1], seq, 0, flags, payload)


# --- reader ---------------------------------------------------------------


def test_bad_magic():
    with pytest.raises(BadMagic):
        read(b"\xde\xad\xbe\xef" + bytes(20))


def test_short_global_header():
    with pytest.raises(TruncatedHeader):
        read(b"\xd4\xc3")
    with pytest.raises(TruncatedHeader):
        read(struct.pack("<I", 0xA1B2C3D4) + bytes(4))


def test_unsupported_linktype():
    with pytest.raises(UnsupportedLinkType):
        read(pcap([], linktype=101))


def test_truncated_final_record():
    data = pcap([frame(CLIENT, SERVER, payload=10), frame(CLIENT, SERVER, payload=10)])[:-5]
    with pytest.raises(TruncatedPacket):
        read(data)
    pkts, r = read(data, strict=False)
    assert len(pkts) == 1 and r.truncated == 1


def test_byte_order_is_transparent():
    frames = [frame(CLIENT, SERVER, seq=7, payload=3), frame(SERVER, CLIENT, seq=9, payload=0)]
    assert read(pcap(frames, "<"))[0] == read(pcap(frames, ">"))[0]


def test_nanosecond_magic():
    (p,), _ = read(pcap([frame(CLIENT, SERVER)], magic=0xA1B23C4D))
    assert p.ts_ns == 100 * 10**9


def test_non_tcp_skipped():
    pkts, r = read(pcap([arp(), frame(CLIENT, SERVER, payload=5), arp()]))
    assert len(pkts) == 1 and r.skipped == 2 and r.packets == 3


def test_payload_ignores_ethernet_padding():
    (p,), _ = read(pcap([frame(CLIENT, SERVER, payload=0, pad=6)]))
    assert p.payload_len == 0


def test_vlan_tag_unwrapped():
    (p,), _ = read(pcap([frame(CLIENT, SERVER, seq=1, payload=12, vlan=True)]))
    assert (p.src, p.dst, p.tcp_seq, p.payload_len) == (CLIENT, SERVER, 1, 12)


def test_read_pcap_file(tmp_path):
    f = tmp_path / "x.pcap"
    f.write_bytes(pcap([frame(CLIENT, SERVER, payload=4)]))
    assert read_pcap(f)[0].payload_len == 4


def test_parse_endpoint():
    assert parse_endpoint("10.0.0.2:80") == SERVER
    with pytest.raises(ValueError):
        parse_endpoint("10.0.0.2")
    with pytest.raises(ValueError):
        parse_endpoint("host:80")


# --- flows ---------------------------------------------------------------


def test_flow_key_canonical():
    assert FlowKey.of(SERVER, CLIENT) == FlowKey.of(CLIENT, SERVER)
    assert str(FlowKey.of(SERVER, CLIENT)) == "10.0.0.1:40000-10.0.0.2:80"
    # numeric, not string, ordering of addresses
    assert FlowKey.of(("10.0.0.10", 1), ("10.0.0.9", 1)).a == ("10.0.0.9", 1)


def test_exact_duplicate_counts_as_retransmission():
    p = pkt(SERVER, CLIENT, 1000, 500)
    (f,) = assemble_flows([p, p])
    assert f.packets == 2 and f.payload_bytes == 1000
    assert f.retx_segs == 1 and f.retx_bytes == 500


def test_partial_overlap_counts_only_overlap():
    (f,) = assemble_flows([pkt(SERVER, CLIENT, 0, 100), pkt(SERVER, CLIENT, 50, 100)])
    assert f.retx_segs == 1 and f.retx_bytes == 50


def test_retransmission_across_sequence_wrap():
    top = (1 << 32) - 10
    (f,) = assemble_flows([pkt(SERVER, CLIENT, top, 20), pkt(SERVER, CLIENT, 10, 5), pkt(SERVER, CLIENT, top, 20)])
    assert f.retx_segs == 1 and f.retx_bytes == 20


def test_pure_acks_are_not_retransmissions():
    acks = [pkt(CLIENT, SERVER, 1, 0) for _ in range(5)]
    (f,) = assemble_flows(acks)
    assert f.packets == 5 and f.retx_segs == 0


def test_two_interleaved_flows():
    other = ("10.0.0.3", 40001)
    pkts = [pkt(CLIENT, SERVER, 0, 10), pkt(other, SERVER, 0, 20), pkt(SERVER, CLIENT, 0, 30), pkt(other, SERVER, 20, 5)]
    f1, f2 = assemble_flows(pkts)
    assert (f1.packets_a2b, f1.packets_b2a, f1.bytes_a2b, f1.bytes_b2a) == (1, 1, 10, 30)
    assert f2.key == FlowKey.of(other, SERVER)
    assert (f2.packets, f2.payload_bytes) == (2, 25)


def test_experiment_stats_empty():
    s = experiment_stats([])
    assert (s.flow_count, s.total_packets, s.total_payload_bytes, s.total_retransmitted_bytes) == (0, 0, 0, 0)


def test_experiment_stats_two_flows():
    other = ("10.0.0.3", 40001)
    pkts = [pkt(CLIENT, SERVER, i, 0) for i in range(10)] + [pkt(other, SERVER, i, 0) for i in range(20)]
    s = experiment_stats(assemble_flows(pkts))
    assert s.flow_count == 2 and s.total_packets == 30


def test_experiment_stats_server_bytes_include_retransmits():
    # a megabyte served in 1000-byte segments, one 4 KB stretch sent twice
    pkts = [pkt(SERVER, CLIENT, i * 1000, 1000) for i in range(1000)]
    pkts += [pkt(SERVER, CLIENT, i * 1000, 1000) for i in range(4)]
    pkts += [pkt(CLIENT, SERVER, 0, 100)]
    s = experiment_stats(assemble_flows(pkts), SERVER)
    assert s.server_to_client_bytes == 1_004_000
    assert s.total_retransmitted_bytes == 4000


def test_unknown_server():
    with pytest.raises(UnknownServerEndpoint):
        experiment_stats(assemble_flows([pkt(CLIENT, SERVER, 0, 1)]), ("10.9.9.9", 80))


def test_csv_output():
    buf = io.StringIO()
    write_flows_csv(assemble_flows([pkt(CLIENT, SERVER, 0, 10, ts=5), pkt(SERVER, CLIENT, 0, 3, ts=9)]), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == CSV_HEADER
    assert lines[1] == "10.0.0.1:40000-10.0.0.2:80,1,1,10,3,0,0,5,9"


# --- properties -----------------------------------------------------------

segments = st.lists(
    st.tuples(st.sampled_from([(CLIENT, SERVER), (SERVER, CLIENT), (("10.0.0.3", 1), SERVER)]),
              st.integers(0, 5000), st.integers(0, 1500)),
    max_size=40,
)


def _stats(pkts):
    s = experiment_stats(assemble_flows(pkts))
    return (s.flow_count, s.total_packets, s.total_payload_bytes, s.total_retransmitted_bytes)


@given(segments, st.randoms(use_true_random=False))
def test_totals_are_order_invariant(segs, rnd):
    pkts = [pkt(s, d, seq, n) for (s, d), seq, n in segs]
    shuffled = list(pkts)
    rnd.shuffle(shuffled)
    assert _stats(pkts) == _stats(shuffled)


@given(segments)
def test_totals_match_brute_force(segs):
    pkts = [pkt(s, d, seq, n) for (s, d), seq, n in segs]
    s = experiment_stats(assemble_flows(pkts))
    bf = brute_force_flow_totals(pkts)
    assert (s.flow_count, s.total_packets, s.total_payload_bytes) == (bf["flow_count"], bf["total_packets"], bf["total_payload_bytes"])


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**31), st.integers(0, 3))
def test_synthetic_capture_matches_closed_form(tmp_path_factory, seed, dups):
    spec = FlowSpec(CLIENT, SERVER, tuple(Segment("s2c", 1000, i < dups) for i in range(6)) + (Segment("c2s", 100),))
    path = tmp_path_factory.mktemp("p") / "c.pcap"
    syn = synth_pcap([spec], seed, path, noise_packets=3)
    (f,) = assemble_flows(read_pcap(path))
    (exp,) = syn.flows
    assert (f.packets_a2b, f.packets_b2a, f.bytes_a2b, f.bytes_b2a, f.retx_segs, f.retx_bytes) == (
        exp.packets_a2b, exp.packets_b2a, exp.bytes_a2b, exp.bytes_b2a, exp.retx_segs, exp.retx_bytes)
