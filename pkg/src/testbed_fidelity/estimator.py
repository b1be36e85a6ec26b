"""Scikit-learn compatible wrapper around the system-call Markov chain."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from testbed_fidelity import markov
from testbed_fidelity._validation import check_count, check_order, check_sequences, check_threshold
from testbed_fidelity.trace_model import slice_sequence


class SyscallChainModel(BaseEstimator):
    """Fit an order-N Markov chain to call sequences and score new ones.

    Parameters
    ----------
    order : int, default=1
        Number of consecutive calls per state.
    prune_threshold : float, default=0.0
        Arcs lighter than this are dropped from the fitted chain.
    skip : int, default=0
        Calls dropped from the front of each sequence before scoring.
    limit : int or None, default=None
        Maximum number of calls scored per sequence, after ``skip``.

    ``skip`` and ``limit`` only affect scoring: the chain is fitted on
    whole sequences, so start-up behaviour is part of the model.

    Attributes
    ----------
    chain_ : MarkovChain
        Counts merged over all training sequences.
    """

    def __init__(self, order=1, prune_threshold=0.0, skip=0, limit=None):
        self.order = order
        self.prune_threshold = prune_threshold
        self.skip = skip
        self.limit = limit

    def _validate_params(self):
        check_order(self.order)
        check_threshold(self.prune_threshold, "prune_threshold")
        check_count(self.skip, "skip")
        check_count(self.limit, "limit", allow_none=True)

    def fit(self, X, y=None):
        self._validate_params()
        seqs = check_sequences(X, min_length=self.order + 1)
        chain = markov.merge_chains([markov.build_chain(s, self.order) for s in seqs])
        if self.prune_threshold > 0:
            chain = markov.prune(chain, self.prune_threshold)
        self.chain_ = chain
        self.n_sequences_ = len(seqs)
        return self

    def _prepare(self, X):
        check_is_fitted(self, "chain_")
        seqs = check_sequences(X)
        if self.skip or self.limit is not None:
            seqs = [slice_sequence(s, self.skip, self.limit) for s in seqs]
        return seqs

    def walk(self, X):
        """WalkResult for every sequence in ``X``."""
        return [markov.walk(self.chain_, s) for s in self._prepare(X)]

    def score_samples(self, X):
        """log10 probability of each sequence; NaN where a transition is invalid."""
        return np.array(
            [w.log10_prob if w.valid else np.nan for w in self.walk(X)],
            dtype=float,
        )

    def transform(self, X):
        """Invalid-transition count per sequence, as a column vector."""
        return np.array([[w.n_invalid] for w in self.walk(X)], dtype=np.int64)

    def score(self, X, y=None):
        """Mean log10 probability over the sequences that walk without invalid transitions."""
        s = self.score_samples(X)
        s = s[~np.isnan(s)]
        return float(s.mean()) if s.size else float("-inf")

    def predict(self, X):
        """True where the sequence is fully explained by the chain."""
        return self.transform(X)[:, 0] == 0
