"""Order-N empirical Markov chains over system-call sequences.

A state is a tuple of N consecutive call names. Arcs carry integer
transition counts; weights are always derived from counts, so building,
merging and pruning all keep every node's outgoing weights normalised.

Walk probabilities are accumulated as base-10 logarithms because products
over millions of transitions underflow any float.
"""

import math
import warnings
from bisect import bisect_right
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from testbed_fidelity.errors import (
    ChainFormatError,
    DeadEndWarning,
    EmptyInput,
    InvalidWalk,
    LengthMismatch,
    OrderMismatch,
    SequenceTooShort,
)
from testbed_fidelity.trace_model import CallSequence

Node = Tuple[str, ...]

LABEL_SEP = "|"
FORMAT_HEADER = "markov v1"


def node_label(node: Node) -> str:
    return LABEL_SEP.join(node)


def parse_label(label: str) -> Node:
    return tuple(label.split(LABEL_SEP))


def _calls(seq) -> Tuple[str, ...]:
    if isinstance(seq, CallSequence):
        return seq.calls
    return tuple(seq)


class MarkovChain:
    """Immutable transition graph with integer arc counts.

    ``counts`` maps each source node to a mapping of successor node to the
    number of times that transition was observed. Nodes appearing only as
    successors are still nodes of the chain.
    """

    def __init__(self, order: int, counts: Mapping[Node, Mapping[Node, int]], start: Optional[Node] = None):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        self.order = order
        table: Dict[Node, Dict[Node, int]] = {}
        nodes = set()
        for src in sorted(counts):
            succ = counts[src]
            if not succ:
                continue
            row = {}
            for dst in sorted(succ):
                c = int(succ[dst])
                if c < 1:
                    raise ValueError(f"arc count must be >= 1: {src} -> {dst} = {c}")
                if len(src) != order or len(dst) != order or src[1:] != dst[:-1]:
                    raise ValueError(f"arc {src} -> {dst} is not a valid order-{order} transition")
                row[dst] = c
            table[src] = row
            nodes.add(src)
            nodes.update(row)
        if start is not None and start not in nodes:
            raise ValueError(f"start node {start} is not in the chain")
        self._counts = table
        self._totals = {src: sum(row.values()) for src, row in table.items()}
        self._nodes = frozenset(nodes)
        self.start = start

    @property
    def nodes(self) -> frozenset:
        return self._nodes

    @property
    def total_transitions(self) -> int:
        return sum(self._totals.values())

    def __contains__(self, node) -> bool:
        return node in self._nodes

    def __len__(self):
        return len(self._nodes)

    def __eq__(self, other):
        if not isinstance(other, MarkovChain):
            return NotImplemented
        return self.order == other.order and self._counts == other._counts

    def __repr__(self):
        n_arcs = sum(len(r) for r in self._counts.values())
        return f"MarkovChain(order={self.order}, nodes={len(self._nodes)}, arcs={n_arcs})"

    def counts(self) -> Dict[Node, Dict[Node, int]]:
        """A copy of the arc count table."""
        return {src: dict(row) for src, row in self._counts.items()}

    def count(self, src: Node, dst: Node) -> int:
        return self._counts.get(src, {}).get(dst, 0)

    def out_total(self, src: Node) -> int:
        return self._totals.get(src, 0)

    def weight(self, src: Node, dst: Node) -> float:
        c = self.count(src, dst)
        return c / self._totals[src] if c else 0.0

    def successors(self, src: Node) -> List[Tuple[Node, int, float]]:
        """Outgoing arcs of ``src`` as (successor, count, weight), ordered by label."""
        row = self._counts.get(src, {})
        total = self._totals.get(src, 0)
        return [(dst, c, c / total) for dst, c in row.items()]

    def arcs(self) -> Iterator[Tuple[Node, Node, int, float]]:
        for src, row in self._counts.items():
            total = self._totals[src]
            for dst, c in row.items():
                yield src, dst, c, c / total

    @property
    def n_arcs(self) -> int:
        return sum(len(r) for r in self._counts.values())

    def default_start(self) -> Optional[Node]:
        if self.start is not None:
            return self.start
        return min(self._counts) if self._counts else None


@dataclass(frozen=True)
class InvalidTransitionRecord:
    position: int
    from_label: Optional[str]
    to_label: str


@dataclass(frozen=True)
class WalkResult:
    sequence_length: int
    transitions: int
    invalid_transitions: Tuple[InvalidTransitionRecord, ...] = ()
    log10_prob: Optional[float] = None
    source_id: str = field(default="", compare=False)

    @property
    def valid(self) -> bool:
        return not self.invalid_transitions

    @property
    def n_invalid(self) -> int:
        return len(self.invalid_transitions)


def build_chain(seq, order: int = 1) -> MarkovChain:
    calls = _calls(seq)
    if len(calls) < order + 1:
        raise SequenceTooShort(f"need at least {order + 1} calls for an order-{order} chain, got {len(calls)}")
    counts: Dict[Node, Dict[Node, int]] = {}
    prev = calls[:order]
    for i in range(order, len(calls)):
        nxt = calls[i - order + 1 : i + 1]
        row = counts.setdefault(prev, {})
        row[nxt] = row.get(nxt, 0) + 1
        prev = nxt
    return MarkovChain(order, counts, start=calls[:order])


def merge_chains(chains: Sequence[MarkovChain]) -> MarkovChain:
    """Sum arc counts across chains; weights follow from the merged counts."""
    chains = list(chains)
    if not chains:
        raise EmptyInput("merge_chains needs at least one chain")
    order = chains[0].order
    counts: Dict[Node, Dict[Node, int]] = {}
    for ch in chains:
        if ch.order != order:
            raise OrderMismatch(f"cannot merge order {ch.order} with order {order}")
        for src, dst, c, _ in ch.arcs():
            row = counts.setdefault(src, {})
            row[dst] = row.get(dst, 0) + c
    return MarkovChain(order, counts, start=chains[0].start)


def prune(chain: MarkovChain, threshold: float) -> MarkovChain:
    """Drop arcs lighter than ``threshold`` and renormalise each node.

    A node whose arcs all fall below the threshold keeps its heaviest arc
    (lowest successor label on ties). Nodes left without any incident arc
    disappear.
    """
    if not 0 <= threshold < 1:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    counts = {}
    for src in sorted(chain.counts()):
        succ = chain.successors(src)
        kept = {dst: c for dst, c, w in succ if w >= threshold}
        if not kept:
            top = max(c for _, c, _ in succ)
            dst = min(d for d, c, _ in succ if c == top)
            kept = {dst: top}
        counts[src] = kept
    start = chain.start
    pruned = MarkovChain(chain.order, counts)
    if start is not None and start in pruned:
        pruned.start = start
    return pruned


def walk(chain: MarkovChain, seq) -> WalkResult:
    """Replay ``seq`` over ``chain``.

    The state is always the window of the last N calls. A missing start
    window is recorded at position 0; every later transition whose arc is
    absent is recorded at the index of the window it moves to. The walk
    carries on from the sequence's own next window, so later transitions
    are still checked.
    """
    calls = _calls(seq)
    n = chain.order
    if len(calls) < n:
        raise SequenceTooShort(f"sequence of length {len(calls)} is shorter than chain order {n}")
    source_id = seq.source_id if isinstance(seq, CallSequence) else ""
    counts = chain._counts
    totals = chain._totals
    invalid = []
    terms = []
    state = calls[:n]
    if state not in chain:
        invalid.append(InvalidTransitionRecord(0, None, node_label(state)))
    for i in range(n, len(calls)):
        nxt = calls[i - n + 1 : i + 1]
        c = counts.get(state, {}).get(nxt, 0)
        if c:
            terms.append(math.log10(c / totals[state]))
        else:
            invalid.append(InvalidTransitionRecord(i - n + 1, node_label(state), node_label(nxt)))
        state = nxt
    log10_prob = None if invalid else math.fsum(terms)
    return WalkResult(len(calls), len(calls) - n, tuple(invalid), log10_prob, source_id)


def relative_log10(walk_candidate: WalkResult, walk_baseline: WalkResult) -> float:
    """log10(P(candidate) / P(baseline)); positive means the candidate is more probable."""
    if walk_candidate.sequence_length != walk_baseline.sequence_length:
        raise LengthMismatch(
            f"sequence lengths differ: {walk_candidate.sequence_length} vs {walk_baseline.sequence_length}"
        )
    for w in (walk_candidate, walk_baseline):
        if not w.valid:
            raise InvalidWalk(f"walk {w.source_id or ''} has {w.n_invalid} invalid transitions")
    return walk_candidate.log10_prob - walk_baseline.log10_prob


@dataclass(frozen=True)
class InvalidMatrix:
    """Invalid-transition counts of every (chain, sequence) walk."""

    counts: np.ndarray  # shape (n_chains, n_sequences)

    @property
    def per_sequence(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_walks(self) -> int:
        return int(self.counts.size)


def count_invalid(chains: Sequence[MarkovChain], sequences: Sequence) -> InvalidMatrix:
    m = np.zeros((len(chains), len(sequences)), dtype=np.int64)
    for i, ch in enumerate(chains):
        for j, seq in enumerate(sequences):
            m[i, j] = walk(ch, seq).n_invalid
    return InvalidMatrix(m)


def generate(
    chain: MarkovChain,
    length: int,
    seed: int,
    start: Optional[Node] = None,
    restart_on_dead_end: bool = False,
    source_id: str = "",
    process_filter: str = "",
) -> CallSequence:
    """Sample a call sequence from ``chain``.

    Successors are drawn by inverse-CDF sampling over arcs ordered by
    successor label, so a seed reproduces the same sequence everywhere.
    Reaching a node with no outgoing arcs either restarts from ``start`` or
    ends the sequence early with ``truncated=True`` and a DeadEndWarning.
    """
    start = start if start is not None else chain.default_start()
    if start is None:
        raise EmptyInput("cannot generate from an empty chain")
    if start not in chain:
        raise ValueError(f"start node {start} is not in the chain")
    if length < chain.order:
        raise ValueError(f"length {length} is shorter than chain order {chain.order}")

    tables = {}
    for src in chain.counts():
        succ = chain.successors(src)
        tables[src] = ([s[0][-1] for s in succ], [s[0] for s in succ], list(accumulate(s[1] for s in succ)))

    rng = np.random.default_rng(seed)
    draws = rng.random(length)
    out = list(start)
    state = start
    truncated = False
    i = 0
    while len(out) < length:
        tab = tables.get(state)
        if tab is None:
            if restart_on_dead_end:
                out.extend(start[: length - len(out)])
                state = start
                continue
            truncated = True
            warnings.warn(f"dead end at {node_label(state)} after {len(out)} calls", DeadEndWarning, stacklevel=2)
            break
        calls, succ, cum = tab
        k = bisect_right(cum, draws[i] * cum[-1])
        i += 1
        out.append(calls[k])
        state = succ[k]
    return CallSequence(source_id, process_filter, tuple(out), truncated=truncated)


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(chain: MarkovChain, name: str = "markov") -> str:
    """DOT text for ``chain`` with lexicographic node and arc order."""
    lines = [f"digraph {_dot_quote(name)} {{"]
    start = chain.start
    for node in sorted(chain.nodes):
        attrs = " [penwidth=2]" if node == start else ""
        lines.append(f"  {_dot_quote(node_label(node))}{attrs};")
    for src, dst, _, w in chain.arcs():
        lines.append(f"  {_dot_quote(node_label(src))} -> {_dot_quote(node_label(dst))} [label=\"{w:.3f}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def dumps(chain: MarkovChain) -> str:
    header = f"{FORMAT_HEADER} order={chain.order}"
    if chain.start is not None:
        header += f" start={node_label(chain.start)}"
    lines = [header]
    for src, dst, c, _ in chain.arcs():
        lines.append(f"{node_label(src)}\t{node_label(dst)}\t{c}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> MarkovChain:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FORMAT_HEADER + " "):
        raise ChainFormatError(f"missing '{FORMAT_HEADER} order=N' header")
    opts = {}
    for tok in lines[0][len(FORMAT_HEADER) :].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise ChainFormatError(f"bad header token {tok!r}")
        opts[key] = val
    try:
        order = int(opts["order"])
    except (KeyError, ValueError):
        raise ChainFormatError("header lacks a valid order=N") from None
    counts: Dict[Node, Dict[Node, int]] = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ChainFormatError(f"line {lineno}: expected 3 tab-separated fields")
        try:
            c = int(parts[2])
        except ValueError:
            raise ChainFormatError(f"line {lineno}: count {parts[2]!r} is not an integer") from None
        src, dst = parse_label(parts[0]), parse_label(parts[1])
        row = counts.setdefault(src, {})
        row[dst] = row.get(dst, 0) + c
    start = parse_label(opts["start"]) if "start" in opts else None
    try:
        return MarkovChain(order, counts, start=start)
    except ValueError as exc:
        raise ChainFormatError(str(exc)) from None
