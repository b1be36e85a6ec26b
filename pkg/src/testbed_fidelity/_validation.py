"""Input checks shared by the estimator and the pipeline."""

import math
from numbers import Integral, Real

from testbed_fidelity.trace_model import CallSequence


def check_sequences(X, min_length=1):
    """Coerce ``X`` into a list of :class:`CallSequence`.

    Accepts a single CallSequence, or an iterable whose items are
    CallSequences or iterables of call-name strings.
    """
    if isinstance(X, CallSequence):
        X = [X]
    if isinstance(X, str):
        raise TypeError("expected a collection of call sequences, got a single string")
    out = []
    for i, item in enumerate(X):
        if not isinstance(item, CallSequence):
            if isinstance(item, str):
                raise TypeError(f"sequence {i} is a bare string; pass a list of call names")
            calls = tuple(item)
            if not all(isinstance(c, str) for c in calls):
                raise TypeError(f"sequence {i} contains non-string call names")
            item = CallSequence(f"seq{i}", "", calls)
        if len(item) < min_length:
            raise ValueError(f"sequence {i} has {len(item)} calls, need at least {min_length}")
        out.append(item)
    if not out:
        raise ValueError("no sequences given")
    return out


def check_order(order):
    if not isinstance(order, Integral) or isinstance(order, bool) or order < 1:
        raise ValueError(f"order must be a positive integer, got {order!r}")
    return int(order)


def check_threshold(value, name, upper=1.0, closed_upper=False):
    if not isinstance(value, Real) or math.isnan(value):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    ok = 0 <= value <= upper if closed_upper else 0 <= value < upper
    if not ok:
        bracket = "]" if closed_upper else ")"
        raise ValueError(f"{name} must lie in [0, {upper}{bracket}, got {value!r}")
    return float(value)


def check_count(value, name, allow_none=False):
    if value is None and allow_none:
        return None
    if not isinstance(value, Integral) or isinstance(value, bool) or value < 0:
        raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)
