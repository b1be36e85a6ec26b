"""System-call trace parsing.

Traces are plain text, one event per line, in sysdig's default print order::

    event_num timestamp_ns cpu process_name (tid) dir call_name args...

``dir`` is ``>`` for a call entry and ``<`` for its exit. Exit lines of data
calls carry ``res=<int>``. Files may be gzip-compressed.
"""

import enum
import gzip
import io
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Tuple, Union

from testbed_fidelity.errors import EmptySequenceWarning, MalformedLine, SkipExceedsLength

log = logging.getLogger(__name__)

READ_FAMILY = frozenset({"read", "readv", "recv", "recvfrom", "recvmsg", "pread"})

_RES_RE = re.compile(r"(?:^|\s)res=(-?\d+)")
_GZIP_MAGIC = b"\x1f\x8b"


class Direction(enum.Enum):
    ENTER = ">"
    EXIT = "<"


@dataclass(frozen=True)
class SyscallEvent:
    event_num: int
    timestamp_ns: int
    cpu: int
    process_name: str
    thread_id: int
    direction: Direction
    call_name: str
    result_bytes: Optional[int] = None
    raw_args: str = ""


@dataclass(frozen=True)
class CallSequence:
    """Ordered call names for one run and one process filter."""

    source_id: str
    process_filter: str
    calls: Tuple[str, ...]
    # set by generators that hit a node without successors
    truncated: bool = field(default=False, compare=False)

    def __len__(self):
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls)

    def __getitem__(self, idx):
        return self.calls[idx]


@dataclass(frozen=True)
class ReadSummary:
    read_calls: int = 0
    bytes_read: int = 0

    def __add__(self, other):
        return ReadSummary(self.read_calls + other.read_calls, self.bytes_read + other.bytes_read)


def parse_trace_line(line: str, lineno: Optional[int] = None) -> SyscallEvent:
    """Parse one canonical trace line into a :class:`SyscallEvent`."""
    parts = line.rstrip("\r\n").split(None, 7)
    if len(parts) < 7:
        raise MalformedLine(f"expected at least 7 fields, got {len(parts)}", lineno)
    num, ts, cpu, proc, tid, dirc, call = parts[:7]
    args = parts[7] if len(parts) == 8 else ""
    try:
        event_num, timestamp_ns, cpu_i = int(num), int(ts), int(cpu)
    except ValueError:
        raise MalformedLine(f"non-integer numeric field in {parts[:3]!r}", lineno) from None
    if not (tid.startswith("(") and tid.endswith(")")):
        raise MalformedLine(f"thread id must be parenthesised, got {tid!r}", lineno)
    try:
        thread_id = int(tid[1:-1])
    except ValueError:
        raise MalformedLine(f"non-integer thread id {tid!r}", lineno) from None
    try:
        direction = Direction(dirc)
    except ValueError:
        raise MalformedLine(f"direction must be '>' or '<', got {dirc!r}", lineno) from None

    result = None
    if direction is Direction.EXIT:
        m = _RES_RE.search(args)
        if m:
            result = int(m.group(1))
    return SyscallEvent(event_num, timestamp_ns, cpu_i, proc, thread_id, direction, call, result, args)


def format_trace_line(event: SyscallEvent) -> str:
    """Inverse of :func:`parse_trace_line` (no trailing newline)."""
    head = (
        f"{event.event_num} {event.timestamp_ns} {event.cpu} {event.process_name} "
        f"({event.thread_id}) {event.direction.value} {event.call_name}"
    )
    return f"{head} {event.raw_args}" if event.raw_args else head


def _open_text(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == _GZIP_MAGIC:
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def iter_trace_lines(lines: Iterable[str], strict: bool = True) -> Iterator[SyscallEvent]:
    """Parse an iterable of trace lines, skipping blanks.

    In strict mode the first malformed line raises; otherwise it is logged and
    skipped. Event numbers must strictly increase in either mode.
    """
    last = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            ev = parse_trace_line(line, lineno)
            if last is not None and ev.event_num <= last:
                raise MalformedLine(f"event_num {ev.event_num} does not increase (previous {last})", lineno)
        except MalformedLine as exc:
            if strict:
                raise
            log.warning("skipping malformed trace line: %s", exc)
            continue
        last = ev.event_num
        yield ev


def read_trace(path: Union[str, Path], strict: bool = True) -> Iterator[SyscallEvent]:
    """Yield events from a (possibly gzip-compressed) trace file."""
    with _open_text(path) as fh:
        yield from iter_trace_lines(fh, strict=strict)


def load_sequence(trace: Iterable[SyscallEvent], process_filter: str, source_id: str = "") -> CallSequence:
    """Entry-event call names of one process, all threads merged, in event order."""
    calls = tuple(
        ev.call_name
        for ev in trace
        if ev.direction is Direction.ENTER and ev.process_name == process_filter
    )
    if not calls:
        warnings.warn(
            f"no events for process {process_filter!r} in {source_id or 'trace'}",
            EmptySequenceWarning,
            stacklevel=2,
        )
    return CallSequence(source_id, process_filter, calls)


def summarize_reads(trace: Iterable[SyscallEvent], process_filter: str) -> ReadSummary:
    """Count read-family calls and the bytes they returned.

    Every read-family entry counts as a call, including ones that later fail;
    negative results contribute no bytes.
    """
    calls = 0
    nbytes = 0
    for ev in trace:
        if ev.process_name != process_filter or ev.call_name not in READ_FAMILY:
            continue
        if ev.direction is Direction.ENTER:
            calls += 1
        elif ev.result_bytes is not None and ev.result_bytes > 0:
            nbytes += ev.result_bytes
    return ReadSummary(calls, nbytes)


def slice_sequence(seq: CallSequence, skip: int, limit: Optional[int] = None) -> CallSequence:
    """Return ``calls[skip:skip + limit]``.

    Raises SkipExceedsLength when nothing would remain after skipping.
    """
    if skip < 0 or (limit is not None and limit < 0):
        raise ValueError("skip and limit must be non-negative")
    if skip >= len(seq.calls):
        raise SkipExceedsLength(f"skip {skip} >= sequence length {len(seq.calls)} ({seq.source_id})")
    end = None if limit is None else skip + limit
    return CallSequence(seq.source_id, seq.process_filter, seq.calls[skip:end])
