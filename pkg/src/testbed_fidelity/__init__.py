"""Compare two testbed experiment campaigns from their recorded artifacts.

The toolkit works at three levels of abstraction: application (benchmark
throughput), operating system (system-call traces and Markov chains built
from them) and network (TCP flows reconstructed from packet captures, one-way
delay jitter).
"""

__version__ = "0.1.0"

from testbed_fidelity.estimator import SyscallChainModel
from testbed_fidelity.markov import (
    MarkovChain,
    WalkResult,
    build_chain,
    merge_chains,
    prune,
    walk,
)
from testbed_fidelity.stats_compare import (
    ConfidenceInterval,
    SampleSet,
    Verdict,
    confidence_interval,
    similarity,
)

__all__ = [
    "ConfidenceInterval",
    "MarkovChain",
    "SampleSet",
    "SyscallChainModel",
    "Verdict",
    "WalkResult",
    "build_chain",
    "confidence_interval",
    "merge_chains",
    "prune",
    "similarity",
    "walk",
]
