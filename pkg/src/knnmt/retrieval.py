"""Retrieval distributions over neighbour values and their interpolation with a base model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Appendix-B style defaults: 8 neighbours, lambda 0.7, temperature 10.
DEFAULT_K = 8
DEFAULT_LAMBDA = 0.7
DEFAULT_TEMPERATURE = 10.0


@dataclass(frozen=True)
class InterpolationParams:
    k: int = DEFAULT_K
    lam: float = DEFAULT_LAMBDA
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class RetrievalDistribution:
    """Sparse distribution: ``tokens`` ascending, ``probs`` aligned with them."""

    tokens: np.ndarray
    probs: np.ndarray

    def __len__(self):
        return len(self.tokens)

    @property
    def empty(self):
        return len(self.tokens) == 0

    def as_dict(self):
        return {int(t): float(p) for t, p in zip(self.tokens, self.probs)}

    def to_dense(self, vocab_size):
        out = np.zeros(vocab_size, dtype=np.float64)
        out[self.tokens] = self.probs
        return out

    def equals(self, other):
        return (
            self.tokens.tobytes() == other.tokens.tobytes()
            and self.probs.tobytes() == other.probs.tobytes()
        )

    @classmethod
    def empty_distribution(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))


def knn_weights(distances, temperature, normalise=True):
    """Row-wise softmax of -distance/T; rows of an (n,) or (Q, n) array.

    Infinite distances mark padding and receive zero weight.  The minimum
    finite distance is subtracted first so no row over- or underflows.
    With ``normalise=False`` the rows are left unscaled (nearest weight 1).
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    d = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    if np.any(np.isnan(d)) or np.any(d == -np.inf):
        raise ValueError("neighbour distances must be finite")
    valid = np.isfinite(d)
    shift = np.where(valid, d, np.inf).min(axis=1, keepdims=True)
    shift[~np.isfinite(shift)] = 0.0
    w = np.where(valid, np.exp(-(np.where(valid, d, 0.0) - shift) / temperature), 0.0)
    if not normalise:
        return w
    total = w.sum(axis=1, keepdims=True)
    np.divide(w, total, out=w, where=total > 0)
    return w


def _aggregate(tokens, inverse, weights):
    # summing raw weights before dividing keeps a lone token at exactly 1.0
    sums = np.bincount(inverse, weights=weights, minlength=tokens.size)
    return _positive(tokens, sums / sums.sum())


def _positive(tokens, probs):
    # neighbours far behind the nearest one can underflow to zero weight
    keep = probs > 0
    if keep.all():
        return RetrievalDistribution(tokens, probs)
    return RetrievalDistribution(tokens[keep], probs[keep])


def knn_distribution(neighbors, temperature):
    """Aggregate softmax weights of neighbours by token value."""
    if len(neighbors) == 0:
        return RetrievalDistribution.empty_distribution()
    dist = np.asarray(neighbors.distances, dtype=np.float64)
    if not np.all(np.isfinite(dist)):
        raise ValueError("neighbour distances must be finite")
    w = knn_weights(dist, temperature, normalise=False)[0]
    tokens, inverse = np.unique(np.asarray(neighbors.values, dtype=np.int64), return_inverse=True)
    return _aggregate(tokens, inverse, w)


def batch_knn_distributions(indices, distances, values, temperature):
    """Vectorised ``knn_distribution`` for a (Q, k) block of search results.

    Returns one RetrievalDistribution per row; rows without any valid
    neighbour yield the empty distribution.
    """
    w = knn_weights(distances, temperature, normalise=False)
    valid = indices >= 0
    vals = np.where(valid, values[np.where(valid, indices, 0)], 0).astype(np.int64)
    out = []
    for r in range(indices.shape[0]):
        m = valid[r]
        if not m.any():
            out.append(RetrievalDistribution.empty_distribution())
            continue
        tokens, inverse = np.unique(vals[r][m], return_inverse=True)
        out.append(_aggregate(tokens, inverse, w[r][m]))
    return out


def interpolate(p_nmt, p_knn, lam):
    """(1 - lam) * p_nmt + lam * p_knn, with an empty p_knn leaving p_nmt untouched."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    p_nmt = np.asarray(p_nmt, dtype=np.float64)
    if p_knn.empty:
        return p_nmt.copy()
    out = (1.0 - lam) * p_nmt
    out[p_knn.tokens] += lam * p_knn.probs
    return out
