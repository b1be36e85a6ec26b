"""Application-level results and per-request normalisation.

ApacheBench's plain-text report supplies the completed-request count that
every other total is divided by, so testbeds that finish different amounts
of work can be compared. One-way delay samples are summarised by jitter,
which stays meaningful when sender and receiver clocks are not synchronised.
"""

import csv
import enum
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from testbed_fidelity.errors import (
    CrossCheckWarning,
    DegenerateRun,
    MissingField,
    TooFewSamples,
    ZeroRequests,
)

CROSS_CHECK_TOLERANCE = 0.01

_NUM = r"([0-9]+(?:\.[0-9]*)?)"
_FIELDS = {
    "completed_requests": re.compile(r"^\s*Complete requests:\s*" + _NUM + r"\s*$", re.M),
    "duration_s": re.compile(r"^\s*Time taken for tests:\s*" + _NUM + r"\s*seconds", re.M),
    "requests_per_sec": re.compile(r"^\s*Requests per second:\s*" + _NUM + r"\s*\[#/sec\]", re.M),
    "total_transferred_bytes": re.compile(r"^\s*Total transferred:\s*" + _NUM + r"\s*bytes", re.M),
}
_CONCURRENCY = re.compile(r"^\s*Concurrency Level:\s*([0-9]+)\s*$", re.M)


class Level(enum.Enum):
    APPLICATION = "Application"
    OS = "OS"
    NETWORK = "Network"


@dataclass(frozen=True)
class AbResult:
    completed_requests: int
    duration_s: float
    requests_per_sec: float
    total_transferred_bytes: int
    concurrency: Optional[int] = None
    payload_label: str = ""


@dataclass(frozen=True)
class DelaySample:
    send_ts_ns: int
    one_way_delay_ms: float


@dataclass(frozen=True)
class NormalizedMetric:
    name: str
    value_per_request: float
    source_level: Level


def parse_ab_output(text: str, payload_label: str = "") -> AbResult:
    values = {}
    for name, rx in _FIELDS.items():
        m = rx.search(text)
        if m is None:
            raise MissingField(f"ab output has no parsable {name.replace('_', ' ')} line")
        values[name] = m.group(1)
    try:
        completed = int(values["completed_requests"])
        transferred = int(values["total_transferred_bytes"])
    except ValueError:
        raise MissingField("request and byte counts must be integers") from None
    if completed == 0:
        raise DegenerateRun("run completed zero requests")
    duration = float(values["duration_s"])
    rps = float(values["requests_per_sec"])
    m = _CONCURRENCY.search(text)
    res = AbResult(completed, duration, rps, transferred, int(m.group(1)) if m else None, payload_label)
    check_ab_consistency(res)
    return res


def check_ab_consistency(ab: AbResult) -> bool:
    """Warn when the reported rate disagrees with requests/duration by more than 1%."""
    if ab.duration_s <= 0:
        warnings.warn("ab duration is not positive", CrossCheckWarning, stacklevel=3)
        return False
    expected = ab.completed_requests / ab.duration_s
    if abs(ab.requests_per_sec - expected) > CROSS_CHECK_TOLERANCE * expected:
        warnings.warn(
            f"requests/sec {ab.requests_per_sec} disagrees with {ab.completed_requests}/{ab.duration_s}",
            CrossCheckWarning,
            stacklevel=3,
        )
        return False
    return True


def format_ab_output(ab: AbResult) -> str:
    """Render the subset of an ab report that :func:`parse_ab_output` reads."""
    lines = [
        "This is ApacheBench, Version 2.3",
        "",
        "Benchmarking server (be patient)",
        "",
    ]
    if ab.concurrency is not None:
        lines.append(f"Concurrency Level:      {ab.concurrency}")
    lines += [
        f"Time taken for tests:   {ab.duration_s:.3f} seconds",
        f"Complete requests:      {ab.completed_requests}",
        "Failed requests:        0",
        f"Total transferred:      {ab.total_transferred_bytes} bytes",
        f"Requests per second:    {ab.requests_per_sec:.2f} [#/sec] (mean)",
        "",
    ]
    return "\n".join(lines)


def read_ab_output(path: Union[str, Path], payload_label: str = "") -> AbResult:
    return parse_ab_output(Path(path).read_text(encoding="utf-8"), payload_label)


def read_delay_csv(path: Union[str, Path]) -> List[DelaySample]:
    """Read ``send_ts_ns,delay_ms`` rows."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                d = float(row["delay_ms"])
                out.append(DelaySample(int(row["send_ts_ns"]), d))
            except (KeyError, TypeError, ValueError):
                raise MissingField(f"{path}: bad delay row {row!r}") from None
            if not math.isfinite(d):
                raise MissingField(f"{path}: non-finite delay {row['delay_ms']!r}")
    return out


def write_delay_csv(samples: Iterable[DelaySample], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["send_ts_ns", "delay_ms"])
        for s in samples:
            w.writerow([s.send_ts_ns, repr(float(s.one_way_delay_ms))])


def jitter(samples: Sequence) -> float:
    """p95 - p50 of one-way delay in milliseconds.

    Percentiles interpolate the empirical CDF linearly (Hyndman-Fan type 4),
    so on the grid 1..100 the median is 50 and p95 is 95. Accepts
    DelaySample objects or bare delay values.
    """
    if len(samples) < 2:
        raise TooFewSamples(f"jitter needs at least 2 delay samples, got {len(samples)}")
    delays = np.array(
        [s.one_way_delay_ms if isinstance(s, DelaySample) else s for s in samples],
        dtype=float,
    )
    p50, p95 = np.percentile(delays, [50, 95], method="interpolated_inverted_cdf")
    return float(p95 - p50)


def normalize_per_request(total: float, ab: AbResult, name: str, level: Level) -> NormalizedMetric:
    if ab.completed_requests <= 0:
        raise ZeroRequests(f"cannot normalise {name}: no completed requests")
    return NormalizedMetric(name, total / ab.completed_requests, level)
