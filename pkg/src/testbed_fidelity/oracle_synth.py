"""Ground-truth synthetic artifacts and exact oracles.

Every generator returns, alongside the file it writes, the values the
analysis pipeline should recover from it. Those expectations are computed
from the generator's own parameters in closed form, never by running the
code under test.
"""

import gzip
import ipaddress
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from testbed_fidelity.errors import InvalidTransition, SpecError
from testbed_fidelity.markov import MarkovChain, generate
from testbed_fidelity.trace_model import (
    READ_FAMILY,
    CallSequence,
    Direction,
    ReadSummary,
    SyscallEvent,
    format_trace_line,
)
from testbed_fidelity.workload_metrics import AbResult, DelaySample, format_ab_output, write_delay_csv

PathLike = Union[str, Path]


def chain_from_weights(weights: Dict[str, Dict[str, float]], scale: int = 1000, start: Optional[str] = None) -> MarkovChain:
    """Order-1 chain whose arc counts are ``round(weight * scale)``."""
    counts = {}
    for src, row in weights.items():
        counts[(src,)] = {(dst,): max(1, round(w * scale)) for dst, w in row.items()}
    return MarkovChain(1, counts, start=(start,) if start else None)


# The search-a-file example: open, then read lines until found.
SEARCH_WEIGHTS = {
    "open": {"read": 0.99, "error": 0.01},
    "read": {"read": 0.75, "close": 0.25},
}


def search_chain_model() -> MarkovChain:
    return chain_from_weights(SEARCH_WEIGHTS, scale=100, start="open")


# Loop of an HTTP benchmark client: one connect per request.
CLIENT_WEIGHTS = {
    "socket": {"connect": 1.0},
    "connect": {"poll": 1.0},
    "poll": {"write": 0.4, "read": 0.6},
    "write": {"poll": 1.0},
    "read": {"read": 0.55, "poll": 0.3, "close": 0.15},
    "close": {"socket": 1.0},
}

SERVER_WEIGHTS = {
    "epoll_wait": {"accept4": 0.9, "epoll_wait": 0.1},
    "accept4": {"read": 1.0},
    "read": {"write": 0.7, "read": 0.3},
    "write": {"close": 0.6, "write": 0.4},
    "close": {"epoll_wait": 1.0},
}

# Calls that never occur in the steady-state chains above.
INIT_CALLS = ("execve", "brk", "mmap", "mprotect", "arch_prctl", "openat", "fstat", "munmap")


def perturb_chain(chain: MarkovChain, fraction: float, seed: int) -> MarkovChain:
    """Scale each arc count by ``1 + fraction`` or ``1 - fraction`` at random.

    Every node with two or more arcs gets at least one arc of each sign, so
    its weights really move. Topology is kept: no arc is added or removed.
    """
    rng = np.random.default_rng(seed)
    counts = {}
    for src, row in chain.counts().items():
        signs = rng.choice([-1.0, 1.0], size=len(row))
        if len(row) > 1 and abs(signs.sum()) == len(row):
            signs[int(rng.integers(len(row)))] *= -1
        counts[src] = {dst: max(1, round(c * (1 + s * fraction))) for (dst, c), s in zip(row.items(), signs)}
    return MarkovChain(chain.order, counts, start=chain.start)


@dataclass(frozen=True)
class SynthTrace:
    sequence: CallSequence
    reads: ReadSummary
    n_events: int


def synth_trace(
    chain: MarkovChain,
    length: int,
    seed: int,
    process_name: str,
    path: Optional[PathLike] = None,
    prefix: Sequence[str] = (),
    background: Sequence[str] = ("sshd",),
    background_rate: float = 0.05,
    threads: int = 2,
    restart_on_dead_end: bool = False,
) -> SynthTrace:
    """Write a canonical trace whose ``process_name`` calls are ``prefix`` + a generated walk.

    Each call is an entry line followed by its exit line. Read-family exits
    return a positive byte count or, sometimes, -11 (EAGAIN). Background
    processes are interleaved at ``background_rate`` per call.
    """
    gen = generate(
        chain, length, seed, source_id=f"synth-{seed}", process_filter=process_name,
        restart_on_dead_end=restart_on_dead_end,
    )
    calls = tuple(prefix) + gen.calls
    rng = np.random.default_rng([seed, 1])
    lines = []
    num = 0
    ts = 1_000_000_000
    read_calls = 0
    read_bytes = 0

    def emit(proc, tid, call, exit_args):
        nonlocal num, ts
        for direction, args in ((Direction.ENTER, "fd=3"), (Direction.EXIT, exit_args)):
            num += 1
            ts += int(rng.integers(200, 5000))
            ev = SyscallEvent(num, ts, int(rng.integers(0, 8)), proc, tid, direction, call, None, args)
            lines.append(format_trace_line(ev))

    for call in calls:
        if background and rng.random() < background_rate:
            proc = background[int(rng.integers(len(background)))]
            emit(proc, 900, "read", f"res={int(rng.integers(1, 100))}")
        tid = 100 + int(rng.integers(threads))
        if call in READ_FAMILY:
            read_calls += 1
            res = -11 if rng.random() < 0.1 else int(rng.integers(1, 4097))
            read_bytes += max(res, 0)
        else:
            res = 0
        emit(process_name, tid, call, f"res={res}")

    if path is not None:
        text = "\n".join(lines) + "\n"
        path = Path(path)
        if path.suffix == ".gz":
            with gzip.open(path, "wt", encoding="utf-8") as fh:
                fh.write(text)
        else:
            path.write_text(text, encoding="utf-8")
    seq = CallSequence(gen.source_id, process_name, calls, truncated=gen.truncated)
    return SynthTrace(seq, ReadSummary(read_calls, read_bytes), len(lines))


# ---------------------------------------------------------------------------
# packet captures

C2S, S2C = "c2s", "s2c"


@dataclass(frozen=True)
class Segment:
    direction: str
    payload_len: int
    duplicate: bool = False


@dataclass(frozen=True)
class FlowSpec:
    client: Tuple[str, int]
    server: Tuple[str, int]
    segments: Tuple[Segment, ...] = ()
    handshake: bool = True
    teardown: bool = True
    ack_each: bool = True

    def validate(self):
        for ep in (self.client, self.server):
            try:
                ipaddress.IPv4Address(ep[0])
            except ValueError:
                raise SpecError(f"bad IPv4 address {ep[0]!r}") from None
            if not 0 < ep[1] < 65536:
                raise SpecError(f"bad port {ep[1]}")
        if self.client == self.server:
            raise SpecError("client and server endpoints must differ")
        for seg in self.segments:
            if seg.direction not in (C2S, S2C):
                raise SpecError(f"segment direction must be c2s or s2c, got {seg.direction!r}")
            if not 0 < seg.payload_len <= 65000:
                raise SpecError(f"segment payload must be in 1..65000 bytes, got {seg.payload_len}")

    def expected(self) -> Dict[str, int]:
        """Closed-form per-direction counters keyed c2s_/s2c_."""
        hs, td, ack = int(self.handshake), int(self.teardown), int(self.ack_each)
        exp = {}
        for d, other, hs_pkts in ((C2S, S2C, 2 * hs), (S2C, C2S, hs)):
            mine = [s for s in self.segments if s.direction == d]
            n_other = sum(1 for s in self.segments if s.direction == other)
            exp[f"{d}_packets"] = hs_pkts + sum(1 + s.duplicate for s in mine) + ack * n_other + 2 * td
            exp[f"{d}_bytes"] = sum(s.payload_len * (1 + s.duplicate) for s in mine)
            exp[f"{d}_retx_segs"] = sum(s.duplicate for s in mine)
            exp[f"{d}_retx_bytes"] = sum(s.payload_len for s in mine if s.duplicate)
        return exp


@dataclass(frozen=True)
class ExpectedFlow:
    """Expected counters oriented the way the canonical flow key orients them."""

    key: str
    packets_a2b: int
    packets_b2a: int
    bytes_a2b: int
    bytes_b2a: int
    retx_segs: int
    retx_bytes: int


@dataclass
class SynthPcap:
    flows: List[ExpectedFlow]
    specs: List[FlowSpec]
    tcp_packets: int
    skipped_packets: int
    per_spec: List[Dict[str, int]] = field(default_factory=list)

    def expected_stats(self, server: Tuple[str, int]) -> Dict[str, int]:
        s2c = 0
        for spec, exp in zip(self.specs, self.per_spec):
            if spec.server == server:
                s2c += exp["s2c_bytes"]
            elif spec.client == server:
                s2c += exp["c2s_bytes"]
        return {
            "flow_count": len(self.flows),
            "total_packets": sum(f.packets_a2b + f.packets_b2a for f in self.flows),
            "total_payload_bytes": sum(f.bytes_a2b + f.bytes_b2a for f in self.flows),
            "total_retransmitted_bytes": sum(f.retx_bytes for f in self.flows),
            "server_to_client_bytes": s2c,
        }


_MAC_A = bytes.fromhex("020000000001")
_MAC_B = bytes.fromhex("020000000002")
_FIN, _SYN, _ACK, _PSH = 0x01, 0x02, 0x10, 0x08


def _ip_checksum(hdr: bytes) -> int:
    s = sum(struct.unpack("!10H", hdr))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def _tcp_frame(src, dst, seq, ack, flags, payload_len, vlan) -> bytes:
    tcp = struct.pack("!HHIIBBHHH", src[1], dst[1], seq % (1 << 32), ack % (1 << 32), 5 << 4, flags, 65535, 0, 0)
    total = 20 + len(tcp) + payload_len
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, 0, 0x4000, 64, 6, 0,
        ipaddress.IPv4Address(src[0]).packed, ipaddress.IPv4Address(dst[0]).packed,
    )
    ip = ip[:10] + struct.pack("!H", _ip_checksum(ip)) + ip[12:]
    return _eth(0x0800, vlan) + ip + tcp + bytes(payload_len)


def _eth(ethertype, vlan) -> bytes:
    if vlan is not None:
        return _MAC_B + _MAC_A + struct.pack("!HHH", 0x8100, vlan, ethertype)
    return _MAC_B + _MAC_A + struct.pack("!H", ethertype)


def _noise_frame(rng, vlan) -> bytes:
    if rng.random() < 0.5:
        # ARP request
        return _eth(0x0806, vlan) + struct.pack("!HHBBH", 1, 0x0800, 6, 4, 1) + bytes(20)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 28, 0, 0, 64, 17, 0, bytes([10, 0, 0, 9]), bytes([10, 0, 0, 10]))
    return _eth(0x0800, vlan) + ip + struct.pack("!HHHH", 5353, 5353, 8, 0)


def _flow_packets(spec: FlowSpec, rng) -> List[Tuple]:
    """(src, dst, seq, ack, flags, payload_len) tuples in send order."""
    c, s = spec.client, spec.server
    nxt = {C2S: int(rng.integers(0, 1 << 32)), S2C: int(rng.integers(0, 1 << 32))}
    # occasionally start just below the wrap point to exercise modulo arithmetic
    if rng.random() < 0.3:
        nxt[C2S] = (1 << 32) - int(rng.integers(1, 3000))
    ends = {C2S: (c, s), S2C: (s, c)}
    other = {C2S: S2C, S2C: C2S}
    out = []
    if spec.handshake:
        out.append((c, s, nxt[C2S], 0, _SYN, 0))
        nxt[C2S] += 1
        out.append((s, c, nxt[S2C], nxt[C2S], _SYN | _ACK, 0))
        nxt[S2C] += 1
        out.append((c, s, nxt[C2S], nxt[S2C], _ACK, 0))
    pending_dups = []
    for seg in spec.segments:
        d = seg.direction
        src, dst = ends[d]
        pkt = (src, dst, nxt[d], nxt[other[d]], _ACK | _PSH, seg.payload_len)
        out.append(pkt)
        nxt[d] += seg.payload_len
        if spec.ack_each:
            out.append((dst, src, nxt[other[d]], nxt[d], _ACK, 0))
        if seg.duplicate:
            pending_dups.append(pkt)
        # release each duplicate after a random delay of 0..2 segments
        still = []
        for p in pending_dups:
            if rng.random() < 0.5:
                out.append(p)
            else:
                still.append(p)
        pending_dups = still
    out.extend(pending_dups)
    if spec.teardown:
        out.append((c, s, nxt[C2S], nxt[S2C], _FIN | _ACK, 0))
        nxt[C2S] += 1
        out.append((s, c, nxt[S2C], nxt[C2S], _ACK, 0))
        out.append((s, c, nxt[S2C], nxt[C2S], _FIN | _ACK, 0))
        nxt[S2C] += 1
        out.append((c, s, nxt[C2S], nxt[S2C], _ACK, 0))
    return out


def _canonical(client, server):
    ck = (int(ipaddress.IPv4Address(client[0])), client[1])
    sk = (int(ipaddress.IPv4Address(server[0])), server[1])
    return (client, server, True) if ck <= sk else (server, client, False)


def synth_pcap(
    specs: Sequence[FlowSpec],
    seed: int,
    path: PathLike,
    noise_packets: int = 0,
    vlan: Optional[int] = None,
    big_endian: bool = False,
) -> SynthPcap:
    """Write a classic pcap realising ``specs``, flows interleaved at random."""
    specs = list(specs)
    keys = set()
    for spec in specs:
        spec.validate()
        key = frozenset((spec.client, spec.server))
        if key in keys:
            raise SpecError(f"two specs share the endpoint pair {sorted(key)}")
        keys.add(key)
    rng = np.random.default_rng(seed)
    queues = [_flow_packets(spec, rng) for spec in specs]
    tags = [i for i, q in enumerate(queues) for _ in q] + [-1] * noise_packets
    order = rng.permutation(len(tags)) if tags else []
    # a random permutation of the tag multiset is a random interleaving that
    # keeps every flow's own packet order
    cursors = [0] * len(queues)
    frames = []
    for idx in order:
        tag = tags[idx]
        if tag < 0:
            frames.append(_noise_frame(rng, vlan))
        else:
            pkt = queues[tag][cursors[tag]]
            cursors[tag] += 1
            frames.append(_tcp_frame(*pkt, vlan=vlan))

    e = ">" if big_endian else "<"
    ts = 1_600_000_000 * 1_000_000
    with open(path, "wb") as fh:
        fh.write(struct.pack(e + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
        for fr in frames:
            ts += int(rng.integers(1, 2000))
            fh.write(struct.pack(e + "IIII", ts // 1_000_000, ts % 1_000_000, len(fr), len(fr)))
            fh.write(fr)

    flows = []
    per_spec = []
    for spec in specs:
        exp = spec.expected()
        per_spec.append(exp)
        a, b, client_is_a = _canonical(spec.client, spec.server)
        fwd, rev = (C2S, S2C) if client_is_a else (S2C, C2S)
        flows.append(
            ExpectedFlow(
                key=f"{a[0]}:{a[1]}-{b[0]}:{b[1]}",
                packets_a2b=exp[f"{fwd}_packets"],
                packets_b2a=exp[f"{rev}_packets"],
                bytes_a2b=exp[f"{fwd}_bytes"],
                bytes_b2a=exp[f"{rev}_bytes"],
                retx_segs=exp["c2s_retx_segs"] + exp["s2c_retx_segs"],
                retx_bytes=exp["c2s_retx_bytes"] + exp["s2c_retx_bytes"],
            )
        )
    flows = [f for f in flows if f.packets_a2b + f.packets_b2a > 0]
    tcp = sum(len(q) for q in queues)
    return SynthPcap(flows, specs, tcp, noise_packets, per_spec)


def random_flow_specs(
    rng: np.random.Generator,
    max_flows: int = 10,
    max_segments: int = 100,
    max_duplicates: int = 10,
    server: Tuple[str, int] = ("10.0.0.2", 80),
) -> List[FlowSpec]:
    """Random FlowSpecs within the given bounds; segments and duplicates count across all flows."""
    n_flows = int(rng.integers(1, max_flows + 1))
    n_segs = int(rng.integers(0, max_segments + 1))
    n_dups = int(rng.integers(0, min(max_duplicates, n_segs) + 1))
    owner = rng.integers(0, n_flows, size=n_segs)
    dup_idx = set(rng.choice(n_segs, size=n_dups, replace=False).tolist()) if n_dups else set()
    segs = [[] for _ in range(n_flows)]
    for i in range(n_segs):
        segs[owner[i]].append(
            Segment(C2S if rng.random() < 0.3 else S2C, int(rng.integers(1, 1449)), i in dup_idx)
        )
    specs = []
    for f in range(n_flows):
        host = f"10.0.{int(rng.integers(0, 3))}.{int(rng.integers(1, 255))}"
        client = (host, 40000 + f)
        specs.append(
            FlowSpec(
                client,
                server,
                tuple(segs[f]),
                handshake=bool(rng.random() < 0.8),
                teardown=bool(rng.random() < 0.8),
                ack_each=bool(rng.random() < 0.7),
            )
        )
    return specs


# ---------------------------------------------------------------------------
# application-level files


def synth_ab(
    completed: int,
    duration_s: float,
    transferred: int,
    path: Optional[PathLike] = None,
    concurrency: int = 10,
    payload_label: str = "",
) -> AbResult:
    # ab prints the duration to the millisecond; derive the rate from what is printed
    duration_s = max(round(duration_s, 3), 0.001)
    ab = AbResult(completed, duration_s, completed / duration_s, transferred, concurrency, payload_label)
    if path is not None:
        Path(path).write_text(format_ab_output(ab), encoding="utf-8")
    return ab


def synth_delays(
    n: int,
    seed: int,
    path: Optional[PathLike] = None,
    base_ms: float = 0.2,
    scale_ms: float = 0.1,
    clock_offset_ms: float = 0.0,
) -> List[DelaySample]:
    """Exponentially distributed queueing delay on top of a fixed base, shifted by a clock offset."""
    rng = np.random.default_rng(seed)
    delays = base_ms + clock_offset_ms + rng.exponential(scale_ms, size=n)
    samples = [DelaySample(1_000_000_000 + 10_000_000 * i, float(d)) for i, d in enumerate(delays)]
    if path is not None:
        write_delay_csv(samples, path)
    return samples


# ---------------------------------------------------------------------------
# exact walk oracle


@dataclass(frozen=True)
class ExactWalkOracle:
    chain: MarkovChain
    sequence: Tuple[str, ...]
    probability: Fraction
    invalid_transitions: int

    def log10(self) -> float:
        if self.invalid_transitions:
            raise InvalidTransition(f"{self.invalid_transitions} invalid transitions; probability is zero")
        return math.log10(self.probability.numerator) - math.log10(self.probability.denominator)


def exact_walk(chain: MarkovChain, sequence, max_transitions: int = 1000) -> ExactWalkOracle:
    """Probability of ``sequence`` under ``chain`` as an exact fraction of counts.

    Invalid transitions are counted the way a walk counts them: one for a
    start window that is not a node, one per consecutive window pair with no
    arc.
    """
    calls = tuple(sequence.calls if isinstance(sequence, CallSequence) else sequence)
    n = chain.order
    if len(calls) < n:
        raise ValueError("sequence shorter than chain order")
    if len(calls) - n > max_transitions:
        raise ValueError(f"more than {max_transitions} transitions; exact arithmetic would be too slow")
    table = chain.counts()
    nodes = set(table)
    for row in table.values():
        nodes.update(row)
    windows = [calls[i : i + n] for i in range(len(calls) - n + 1)]
    invalid = 0 if windows[0] in nodes else 1
    prob = Fraction(1)
    for x, y in zip(windows, windows[1:]):
        row = table.get(x, {})
        if y in row:
            prob *= Fraction(row[y], sum(row.values()))
        else:
            invalid += 1
    return ExactWalkOracle(chain, calls, Fraction(0) if invalid else prob, invalid)


def brute_force_flow_totals(packets) -> Dict[str, int]:
    """Packet and payload totals straight from the packet list, ignoring flows."""
    return {
        "flow_count": len({frozenset((p.src, p.dst)) for p in packets}),
        "total_packets": sum(1 for _ in packets),
        "total_payload_bytes": sum(p.payload_len for p in packets),
    }


# ---------------------------------------------------------------------------
# whole campaigns

RESPONSE_HEADER_BYTES = 250
REQUEST_BYTES = 100
MSS = 1448


def client_chain() -> MarkovChain:
    return chain_from_weights(CLIENT_WEIGHTS, start="socket")


def server_chain() -> MarkovChain:
    return chain_from_weights(SERVER_WEIGHTS, start="epoll_wait")


def _request_flow(k: int, payload_bytes: int, dup_prob: float, rng) -> FlowSpec:
    segs = [Segment(C2S, REQUEST_BYTES, bool(rng.random() < dup_prob))]
    remaining = RESPONSE_HEADER_BYTES + payload_bytes
    while remaining > 0:
        n = min(MSS, remaining)
        segs.append(Segment(S2C, n, bool(rng.random() < dup_prob)))
        remaining -= n
    return FlowSpec(("10.0.0.1", 10000 + k), ("10.0.0.2", 80), tuple(segs))


def synth_campaign(
    out_dir: PathLike,
    campaign_id: str,
    runs: int = 10,
    seed: int = 0,
    length: int = 5000,
    perturb: float = 0.0,
    prefix_calls: int = 0,
    payload_bytes: int = 500,
    payload_label: str = "500B",
    link_label: str = "1Gbps",
    delay_samples: int = 1000,
    dup_prob: float = 0.01,
    base_rate: float = 1000.0,
) -> Path:
    """Write a complete synthetic campaign and return its manifest path.

    Each run has client and server traces generated from fixed chains (with
    arc counts perturbed by ``perturb`` if non-zero), one TCP flow per client
    ``connect``, a matching ab report and a delay CSV. ``prefix_calls``
    prepends that many start-up calls that the chains never produce.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cli, srv = client_chain(), server_chain()
    if perturb:
        cli = perturb_chain(cli, perturb, seed=seed + 1)
        srv = perturb_chain(srv, perturb, seed=seed + 2)
    prefix = tuple(INIT_CALLS[i % len(INIT_CALLS)] for i in range(prefix_calls))

    lines = [
        f"# synthetic campaign, seed={seed}, perturb={perturb}, prefix_calls={prefix_calls}",
        "[campaign]",
        f"id = {campaign_id}",
        "client_process = ab",
        "server_process = protonuke",
        "server_endpoint = 10.0.0.2:80",
        f"payload = {payload_label}",
        f"link = {link_label}",
    ]
    for i in range(runs):
        run_id = f"run{i + 1:02d}"
        s_client, s_server, s_pcap, s_delay, s_misc = (
            int(x) for x in np.random.SeedSequence([seed, i]).generate_state(5)
        )
        rdir = out / run_id
        rdir.mkdir(exist_ok=True)
        ct = synth_trace(cli, length, s_client, "ab", rdir / "client.trace", prefix=prefix)
        synth_trace(srv, length, s_server, "protonuke", rdir / "server.trace")
        rng = np.random.default_rng(s_misc)
        n_req = sum(1 for c in ct.sequence.calls[len(prefix):] if c == "connect")
        specs = [_request_flow(k, payload_bytes, dup_prob, rng) for k in range(n_req)]
        synth_pcap(specs, s_pcap, rdir / "capture.pcap")
        rate = base_rate * (1 + 0.02 * rng.standard_normal())
        synth_ab(
            n_req, n_req / rate, n_req * (RESPONSE_HEADER_BYTES + payload_bytes),
            rdir / "ab.txt", payload_label=payload_label,
        )
        synth_delays(delay_samples, s_delay, rdir / "delays.csv", clock_offset_ms=float(rng.uniform(-5000, 5000)))
        lines += [
            "",
            "[run]",
            f"run_id = {run_id}",
            f"client_trace = {run_id}/client.trace",
            f"server_trace = {run_id}/server.trace",
            f"pcap = {run_id}/capture.pcap",
            f"ab_output = {run_id}/ab.txt",
            f"delay_csv = {run_id}/delays.csv",
        ]
    manifest = out / "manifest.ini"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
