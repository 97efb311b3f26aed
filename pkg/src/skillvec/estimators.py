"""scikit-learn style wrappers around the delta and overlap APIs.

Kept apart from the core modules so that importing those (as trainer hooks
and the command line do) does not pay for importing scikit-learn.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .delta_arith import apply_delta, delta_norms, extract_delta
from .ortho_lab import IsotropicSampler, UpdatePair, mc_overlap


class SkillVector(BaseEstimator):
    """Extract a skill vector from a fine-tuned pair and graft it onto other checkpoints.

    ``fit(rl, sft)`` stores ``rl - sft`` in ``vector_``; ``transform(target,
    out_path)`` writes ``target + lam * vector_``.
    """

    def __init__(self, lam=1.0, mode="strict", exclude=(), dtype=None, threads=1):
        self.lam = lam
        self.mode = mode
        self.exclude = exclude
        self.dtype = dtype
        self.threads = threads

    def fit(self, X, y):
        self.vector_ = extract_delta(
            X, y, mode=self.mode, exclude=self.exclude, dtype=self.dtype, name="skill_vector", threads=self.threads
        )
        self.norms_ = delta_norms(self.vector_)
        return self

    def transform(self, X, out_path):
        check_is_fitted(self, "vector_")
        return apply_delta(X, self.vector_, self.lam, out_path, threads=self.threads)


class SignalOverlap(BaseEstimator):
    """Estimate ``E<xA, xB>`` by sampling and compare it with ``sigma^2 <A, B>_F``.

    ``fit(A, B)`` sets ``estimate_`` (an :class:`OverlapEstimate`) and
    ``z_score_``.
    """

    def __init__(self, sigma=1.0, n_samples=10_000, distribution="gaussian", method="auto", seed=0):
        self.sigma = sigma
        self.n_samples = n_samples
        self.distribution = distribution
        self.method = method
        self.seed = seed

    def fit(self, X, y):
        pair = UpdatePair.of(X, y)
        s = IsotropicSampler(pair.dim, self.sigma, self.distribution, self.seed)
        self.estimate_ = mc_overlap(pair, s, self.n_samples, self.method)
        self.z_score_ = self.estimate_.z_score
        return self

    def score(self, X=None, y=None):
        """Negative absolute z-score: closer to zero means better agreement."""
        return -abs(self.z_score_)
