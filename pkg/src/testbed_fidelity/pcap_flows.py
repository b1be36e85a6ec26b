"""Classic pcap reading and tcptrace-style per-flow TCP statistics.

Only the subset of tcptrace the comparison needs is implemented: packet,
payload byte and retransmission counts per flow and direction. A segment is
a retransmission when its sequence range overlaps sequence space already
seen in that direction; there is no RTO or duplicate-ACK inference.
"""

import csv
import enum
import ipaddress
import logging
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, List, Optional, Tuple, Union

from testbed_fidelity.errors import (
    BadMagic,
    TruncatedHeader,
    TruncatedPacket,
    UnknownServerEndpoint,
    UnsupportedLinkType,
)

log = logging.getLogger(__name__)

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1

ETH_IPV4 = 0x0800
ETH_VLAN = (0x8100, 0x88A8, 0x9100)
IPPROTO_TCP = 6

SEQ_MOD = 1 << 32

CSV_HEADER = [
    "flow_key",
    "packets_a2b",
    "packets_b2a",
    "bytes_a2b",
    "bytes_b2a",
    "retx_segs",
    "retx_bytes",
    "first_ts",
    "last_ts",
]


class TcpFlag(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


Endpoint = Tuple[str, int]


@dataclass(frozen=True)
class PacketRecord:
    ts_ns: int
    captured_len: int
    orig_len: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    tcp_seq: int
    tcp_ack: int
    flags: TcpFlag
    payload_len: int

    @property
    def src(self) -> Endpoint:
        return (self.src_ip, self.src_port)

    @property
    def dst(self) -> Endpoint:
        return (self.dst_ip, self.dst_port)


def _endpoint_key(ep: Endpoint):
    return (int(ipaddress.IPv4Address(ep[0])), ep[1])


def parse_endpoint(text: str) -> Endpoint:
    """``"10.0.0.2:80"`` -> ``("10.0.0.2", 80)``."""
    host, sep, port = text.strip().rpartition(":")
    if not sep:
        raise ValueError(f"endpoint {text!r} is not of the form ip:port")
    ipaddress.IPv4Address(host)
    return (host, int(port))


def format_endpoint(ep: Endpoint) -> str:
    return f"{ep[0]}:{ep[1]}"


@dataclass(frozen=True, order=True)
class FlowKey:
    """Canonical TCP 5-tuple; endpoint ``a`` is the lower of the two by (ip, port)."""

    a: Endpoint
    b: Endpoint
    protocol: str = "tcp"

    @classmethod
    def of(cls, src: Endpoint, dst: Endpoint) -> "FlowKey":
        if _endpoint_key(src) <= _endpoint_key(dst):
            return cls(src, dst)
        return cls(dst, src)

    def __str__(self):
        return f"{format_endpoint(self.a)}-{format_endpoint(self.b)}"


class PcapReader:
    """Iterate the TCP/IPv4 packets of a classic pcap stream.

    Packets that are not TCP over IPv4 are skipped and counted in
    ``skipped``. In lenient mode a truncated trailing record or a packet too
    short to decode is counted in ``truncated`` instead of raising.
    """

    def __init__(self, fh: BinaryIO, strict: bool = True):
        self._fh = fh
        self.strict = strict
        self.skipped = 0
        self.truncated = 0
        self.packets = 0
        hdr = fh.read(24)
        if len(hdr) < 4:
            raise TruncatedHeader("file too short for a pcap global header")
        magic_le = struct.unpack("<I", hdr[:4])[0]
        if magic_le in (MAGIC_US, MAGIC_NS):
            self._endian = "<"
        elif struct.unpack(">I", hdr[:4])[0] in (MAGIC_US, MAGIC_NS):
            self._endian = ">"
        else:
            raise BadMagic(f"unrecognised pcap magic 0x{hdr[:4].hex()}")
        if len(hdr) < 24:
            raise TruncatedHeader("pcap global header shorter than 24 bytes")
        magic, vmaj, vmin, _, _, self.snaplen, self.linktype = struct.unpack(self._endian + "IHHiIII", hdr)
        self._ts_scale = 1 if magic == MAGIC_NS else 1000
        self.version = (vmaj, vmin)
        if self.linktype != LINKTYPE_ETHERNET:
            raise UnsupportedLinkType(f"link type {self.linktype} is not Ethernet")

    def __iter__(self) -> Iterator[PacketRecord]:
        rec_fmt = self._endian + "IIII"
        while True:
            rh = self._fh.read(16)
            if not rh:
                return
            if len(rh) < 16:
                self._truncated("record header")
                return
            ts_sec, ts_frac, incl_len, orig_len = struct.unpack(rec_fmt, rh)
            data = self._fh.read(incl_len)
            if len(data) < incl_len:
                self._truncated("packet data")
                return
            self.packets += 1
            ts_ns = ts_sec * 1_000_000_000 + ts_frac * self._ts_scale
            rec = self._decode(ts_ns, data, orig_len)
            if rec is not None:
                yield rec

    def _truncated(self, what):
        if self.strict:
            raise TruncatedPacket(f"file ends inside a {what}")
        self.truncated += 1
        log.warning("truncated pcap: file ends inside a %s", what)

    def _decode(self, ts_ns, data, orig_len) -> Optional[PacketRecord]:
        if len(data) < 14:
            return self._short()
        off = 12
        (etype,) = struct.unpack_from("!H", data, off)
        off += 2
        while etype in ETH_VLAN:
            if len(data) < off + 4:
                return self._short()
            (etype,) = struct.unpack_from("!H", data, off + 2)
            off += 4
        if etype != ETH_IPV4:
            self.skipped += 1
            return None
        if len(data) < off + 20:
            return self._short()
        vihl, _, ip_total, _, frag, _, proto = struct.unpack_from("!BBHHHBB", data, off)
        ihl = (vihl & 0x0F) * 4
        if vihl >> 4 != 4 or ihl < 20:
            self.skipped += 1
            return None
        if proto != IPPROTO_TCP or frag & 0x1FFF:
            self.skipped += 1
            return None
        src_ip = str(ipaddress.IPv4Address(data[off + 12 : off + 16]))
        dst_ip = str(ipaddress.IPv4Address(data[off + 16 : off + 20]))
        toff = off + ihl
        if len(data) < toff + 20:
            return self._short()
        sport, dport, seq, ack, doff, flags = struct.unpack_from("!HHIIBB", data, toff)
        thl = (doff >> 4) * 4
        # IP total length, not the frame length, so Ethernet padding is not payload
        payload = max(ip_total - ihl - thl, 0)
        return PacketRecord(
            ts_ns, len(data), orig_len, src_ip, dst_ip, sport, dport, seq, ack,
            TcpFlag(flags & 0x1F), payload,
        )

    def _short(self):
        if self.strict:
            raise TruncatedPacket("captured packet too short to decode headers")
        self.truncated += 1
        return None


def read_pcap(path: Union[str, Path], strict: bool = True) -> List[PacketRecord]:
    """Read every TCP/IPv4 packet of a classic pcap file."""
    with open(path, "rb") as fh:
        reader = PcapReader(fh, strict=strict)
        packets = list(reader)
    if reader.skipped:
        log.info("%s: skipped %d non-TCP packets", path, reader.skipped)
    return packets


class _SeqSpace:
    """Union of half-open intervals of relative sequence numbers seen so far."""

    def __init__(self):
        self.starts: List[int] = []
        self.ends: List[int] = []

    def overlap(self, lo, hi) -> int:
        total = 0
        i = bisect_left(self.ends, lo + 1)
        while i < len(self.starts) and self.starts[i] < hi:
            total += min(hi, self.ends[i]) - max(lo, self.starts[i])
            i += 1
        return total

    def add(self, lo, hi):
        if hi <= lo:
            return
        i = bisect_left(self.ends, lo)
        j = i
        while j < len(self.starts) and self.starts[j] <= hi:
            lo = min(lo, self.starts[j])
            hi = max(hi, self.ends[j])
            j += 1
        self.starts[i:j] = [lo]
        self.ends[i:j] = [hi]


@dataclass
class _Direction:
    packets: int = 0
    bytes: int = 0
    retx_segs: int = 0
    retx_bytes: int = 0
    base: Optional[int] = None
    seen: _SeqSpace = field(default_factory=_SeqSpace)

    def add(self, pkt: PacketRecord):
        self.packets += 1
        self.bytes += pkt.payload_len
        syn = 1 if pkt.flags & TcpFlag.SYN else 0
        fin = 1 if pkt.flags & TcpFlag.FIN else 0
        span = syn + pkt.payload_len + fin
        if span == 0:
            return
        if self.base is None:
            self.base = pkt.tcp_seq
        # signed distance from the first sequence number, modulo 2**32
        rel = (pkt.tcp_seq - self.base + (1 << 31)) % SEQ_MOD - (1 << 31)
        lo, hi = rel, rel + span
        if self.seen.overlap(lo, hi):
            self.retx_segs += 1
            self.retx_bytes += self.seen.overlap(lo + syn, lo + syn + pkt.payload_len)
        self.seen.add(lo, hi)


@dataclass
class TcpFlow:
    key: FlowKey
    packets_a2b: int = 0
    packets_b2a: int = 0
    bytes_a2b: int = 0
    bytes_b2a: int = 0
    retx_segs_a2b: int = 0
    retx_segs_b2a: int = 0
    retx_bytes_a2b: int = 0
    retx_bytes_b2a: int = 0
    first_ts: int = 0
    last_ts: int = 0

    @property
    def packets(self) -> int:
        return self.packets_a2b + self.packets_b2a

    @property
    def payload_bytes(self) -> int:
        return self.bytes_a2b + self.bytes_b2a

    @property
    def retx_segs(self) -> int:
        return self.retx_segs_a2b + self.retx_segs_b2a

    @property
    def retx_bytes(self) -> int:
        return self.retx_bytes_a2b + self.retx_bytes_b2a

    def bytes_from(self, ep: Endpoint) -> int:
        if ep == self.key.a:
            return self.bytes_a2b
        if ep == self.key.b:
            return self.bytes_b2a
        raise UnknownServerEndpoint(f"{format_endpoint(ep)} is not an endpoint of {self.key}")

    def csv_row(self) -> list:
        return [
            str(self.key), self.packets_a2b, self.packets_b2a, self.bytes_a2b, self.bytes_b2a,
            self.retx_segs, self.retx_bytes, self.first_ts, self.last_ts,
        ]


def assemble_flows(packets: Iterable[PacketRecord]) -> List[TcpFlow]:
    """Group packets into flows by canonical 5-tuple, in order of first appearance."""
    flows = {}
    dirs = {}
    for pkt in packets:
        key = FlowKey.of(pkt.src, pkt.dst)
        flow = flows.get(key)
        if flow is None:
            flow = flows[key] = TcpFlow(key, first_ts=pkt.ts_ns, last_ts=pkt.ts_ns)
            dirs[key] = (_Direction(), _Direction())
        a2b = pkt.src == key.a
        d = dirs[key][0 if a2b else 1]
        d.add(pkt)
        flow.first_ts = min(flow.first_ts, pkt.ts_ns)
        flow.last_ts = max(flow.last_ts, pkt.ts_ns)
    out = []
    for key, flow in flows.items():
        da, db = dirs[key]
        flow.packets_a2b, flow.bytes_a2b = da.packets, da.bytes
        flow.packets_b2a, flow.bytes_b2a = db.packets, db.bytes
        flow.retx_segs_a2b, flow.retx_bytes_a2b = da.retx_segs, da.retx_bytes
        flow.retx_segs_b2a, flow.retx_bytes_b2a = db.retx_segs, db.retx_bytes
        out.append(flow)
    return out


@dataclass(frozen=True)
class ExperimentFlowStats:
    flow_count: int = 0
    total_packets: int = 0
    total_payload_bytes: int = 0
    total_retransmitted_bytes: int = 0
    server_to_client_bytes: int = 0


def experiment_stats(flows: List[TcpFlow], server: Optional[Endpoint] = None) -> ExperimentFlowStats:
    """Campaign totals over ``flows``.

    ``server_to_client_bytes`` sums payload sent by ``server`` (retransmits
    included) across the flows that touch it.
    """
    if not flows:
        return ExperimentFlowStats()
    s2c = 0
    if server is not None:
        touched = [f for f in flows if server in (f.key.a, f.key.b)]
        if not touched:
            raise UnknownServerEndpoint(f"no flow touches server endpoint {format_endpoint(server)}")
        s2c = sum(f.bytes_from(server) for f in touched)
    return ExperimentFlowStats(
        flow_count=len(flows),
        total_packets=sum(f.packets for f in flows),
        total_payload_bytes=sum(f.payload_bytes for f in flows),
        total_retransmitted_bytes=sum(f.retx_bytes for f in flows),
        server_to_client_bytes=s2c,
    )


def write_flows_csv(flows: Iterable[TcpFlow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for f in flows:
        w.writerow(f.csv_row())
