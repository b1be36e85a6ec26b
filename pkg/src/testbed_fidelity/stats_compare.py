"""Confidence intervals over repeated runs and similarity verdicts.

Intervals assume normally distributed sample means (z = 1.959964 even for
ten runs). Two means are "similar" when they differ by at most a fraction of
the baseline mean, 10% by default; overlapping intervals are reported as
the stronger criterion.
"""

import math
import statistics
from dataclasses import dataclass
from typing import Sequence

from testbed_fidelity.errors import TooFewSamples, ZeroBaselineMean

Z_95 = 1.959964
DEFAULT_THRESHOLD = 0.10


@dataclass(frozen=True)
class SampleSet:
    metric_name: str
    values: Sequence[float]

    @property
    def n(self) -> int:
        return len(self.values)

    def scaled(self, k: float) -> "SampleSet":
        return SampleSet(self.metric_name, [v * k for v in self.values])


@dataclass(frozen=True)
class ConfidenceInterval:
    mean: float
    half_width: float
    level: float = 0.95

    @property
    def low(self) -> float:
        return self.mean - self.half_width

    @property
    def high(self) -> float:
        return self.mean + self.half_width

    def overlaps(self, other: "ConfidenceInterval") -> bool:
        return self.low <= other.high and other.low <= self.high


@dataclass(frozen=True)
class Verdict:
    relative_diff: float
    similar: bool
    ci_overlap: bool
    threshold: float = DEFAULT_THRESHOLD


def confidence_interval(s: SampleSet) -> ConfidenceInterval:
    if s.n < 2:
        raise TooFewSamples(f"{s.metric_name}: need at least 2 runs for a confidence interval, got {s.n}")
    values = [float(v) for v in s.values]
    mean = statistics.fmean(values)
    sd = statistics.stdev(values, xbar=mean)
    return ConfidenceInterval(mean, Z_95 * sd / math.sqrt(s.n))


def similarity(baseline: SampleSet, candidate: SampleSet, threshold: float = DEFAULT_THRESHOLD) -> Verdict:
    """Compare a candidate against a baseline; the baseline mean is the denominator."""
    b = confidence_interval(baseline)
    c = confidence_interval(candidate)
    if b.mean == 0:
        raise ZeroBaselineMean(f"{baseline.metric_name}: baseline mean is zero")
    rel = abs(c.mean - b.mean) / abs(b.mean)
    return Verdict(rel, rel <= threshold, b.overlaps(c), threshold)
