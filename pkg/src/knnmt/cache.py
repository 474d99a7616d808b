"""Retrieval-distribution cache and the adaptive-retrieval gate.

The cache keeps (query vector, retrieval distribution) pairs produced while
decoding one batch of sentences.  A new query reuses the distribution of its
nearest cached vector when that vector lies within ``tau`` (plain Euclidean
distance); otherwise the caller searches the datastore.

The gate is a one-hidden-layer MLP that predicts the interpolation weight
from cheap pre-retrieval features; steps whose prediction does not exceed
``alpha`` skip retrieval.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .errors import DimensionMismatchError, InvalidHeaderError
from .retrieval import batch_knn_distributions
from .vectorstore import make_searcher

log = logging.getLogger(__name__)

GATE_MAGIC = b"KNNGT1"
DEFAULT_TAU = 6.0
GATE_HIDDEN = 128
_LAM_MIN = np.nextafter(0.0, 1.0)
_LAM_MAX = np.nextafter(1.0, 0.0)


class DistributionCache:
    """Append-only store of (representation, distribution) pairs for one decode session."""

    def __init__(self, tau=DEFAULT_TAU, dim=None):
        if not tau >= 0:
            raise ValueError(f"tau must be non-negative, got {tau}")
        self.tau = float(tau)
        self._dim = dim
        self._reprs = None
        self._norms = None
        self._dists = []

    def __len__(self):
        return len(self._dists)

    @property
    def dim(self):
        return self._dim

    def clear(self):
        self._reprs = None
        self._norms = None
        self._dists = []

    def distribution(self, i):
        return self._dists[i]

    def _check(self, queries):
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        if len(self) and q.shape[1] != self._reprs.shape[1]:
            raise DimensionMismatchError(self._reprs.shape[1], q.shape[1])
        return q

    def lookup_batch(self, queries):
        """Entry index of the nearest cached vector within tau, or -1, per query row.

        Exact distance ties go to the earliest-inserted entry.
        """
        q = self._check(queries)
        n = len(self)
        out = np.full(q.shape[0], -1, dtype=np.int64)
        if n == 0 or q.shape[0] == 0:
            return out
        reprs = self._reprs[:n]
        d2 = self._norms[:n][None, :] - 2.0 * (q @ reprs.T)
        d2 += np.einsum("ij,ij->i", q, q)[:, None]
        best = np.argmin(d2, axis=1)
        scale = np.abs(d2).max(axis=1) * 1e-9 + 1e-12
        for r in range(q.shape[0]):
            j = best[r]
            near = np.flatnonzero(d2[r] <= d2[r, j] + scale[r])
            if near.size > 1:
                exact = np.einsum("ij,ij->i", reprs[near] - q[r], reprs[near] - q[r])
                j = near[np.lexsort((near, exact))[0]]
            diff = reprs[j] - q[r]
            if np.sqrt(diff @ diff) <= self.tau:
                out[r] = j
        return out

    def lookup(self, query):
        """Cached distribution for ``query`` or None on a miss."""
        j = self.lookup_batch(query)[0]
        return None if j < 0 else self._dists[j]

    def insert(self, reprs, dists):
        reprs = np.asarray(reprs, dtype=np.float64)
        if reprs.ndim == 1:
            reprs = reprs[None, :]
        if reprs.shape[0] != len(dists):
            raise ValueError(f"{reprs.shape[0]} representations but {len(dists)} distributions")
        if reprs.shape[0] == 0:
            return
        if self._dim is not None and reprs.shape[1] != self._dim:
            raise DimensionMismatchError(self._dim, reprs.shape[1])
        self._dim = reprs.shape[1]
        n = len(self)
        need = n + reprs.shape[0]
        if self._reprs is None or need > self._reprs.shape[0]:
            cap = max(64, 2 * need)
            grown = np.empty((cap, self._dim))
            norms = np.empty(cap)
            if n:
                grown[:n] = self._reprs[:n]
                norms[:n] = self._norms[:n]
            self._reprs, self._norms = grown, norms
        self._reprs[n:need] = reprs
        self._norms[n:need] = np.einsum("ij,ij->i", reprs, reprs)
        self._dists.extend(dists)


def cache_lookup(cache, query):
    return cache.lookup(query)


def cache_insert(cache, reprs, dists):
    cache.insert(reprs, dists)


# -- adaptive retrieval gate ---------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gate_features(queries, p_nmt):
    """Query vector plus the base model's max probability and entropy."""
    p = np.asarray(p_nmt, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    q = np.asarray(queries, dtype=np.float64).reshape(p.shape[0], -1)
    return np.concatenate([q, p.max(axis=1)[:, None], ent[:, None]], axis=1)


@dataclass
class AdaptiveGate:
    w1: np.ndarray  # (hidden, feature_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    alpha: float = 0.5

    @classmethod
    def initialise(cls, feature_dim, hidden=GATE_HIDDEN, alpha=0.5, seed=0):
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((hidden, feature_dim)) * np.sqrt(2.0 / feature_dim)
        w2 = rng.standard_normal(hidden) * np.sqrt(1.0 / hidden) * 0.1
        return cls(w1, np.zeros(hidden), w2, 0.0, alpha)

    @property
    def feature_dim(self):
        return self.w1.shape[1]

    @property
    def hidden(self):
        return self.w1.shape[0]

    def forward(self, features):
        x = np.asarray(features, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.feature_dim:
            raise DimensionMismatchError(self.feature_dim, x.shape[1], what="feature")
        h = np.maximum(x @ self.w1.T + self.b1, 0.0)
        # a saturated sigmoid rounds to exactly 0 or 1 in float64
        lam = np.clip(_sigmoid(h @ self.w2 + self.b2), _LAM_MIN, _LAM_MAX)
        return lam[0] if single else lam

    def get_params(self):
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def set_params(self, flat):
        h, f = self.w1.shape
        self.w1 = flat[: h * f].reshape(h, f).copy()
        self.b1 = flat[h * f : h * f + h].copy()
        self.w2 = flat[h * f + h : h * f + 2 * h].copy()
        self.b2 = float(flat[-1])


def gate_lambda(gate, features):
    return float(gate.forward(np.asarray(features, dtype=np.float64)))


def should_retrieve(lam, alpha):
    return lam > alpha


def gate_objective_and_grad(gate, x, p_nmt_gold, p_knn_gold):
    """Mean log[(1 - lam) p_nmt + lam p_knn] over steps and its gradient (flat, params order)."""
    x = np.asarray(x, dtype=np.float64)
    pre = x @ gate.w1.T + gate.b1
    h = np.maximum(pre, 0.0)
    lam = _sigmoid(h @ gate.w2 + gate.b2)
    mix = (1.0 - lam) * p_nmt_gold + lam * p_knn_gold + 1e-12
    n = x.shape[0]
    obj = float(np.mean(np.log(mix)))
    dz = (p_knn_gold - p_nmt_gold) / mix * lam * (1.0 - lam) / n
    g_w2 = h.T @ dz
    g_b2 = dz.sum()
    dpre = np.outer(dz, gate.w2) * (pre > 0)
    g_w1 = dpre.T @ x
    g_b1 = dpre.sum(axis=0)
    return obj, np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])


def gate_objective(gate, x, p_nmt_gold, p_knn_gold):
    return gate_objective_and_grad(gate, x, p_nmt_gold, p_knn_gold)[0]


@dataclass
class GateTrainingConfig:
    k: int = 8
    temperature: float = 10.0
    hidden: int = GATE_HIDDEN
    alpha: float = 0.5
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 512
    seed: int = 0
    history: list = field(default_factory=list, repr=False)


def collect_gate_data(model, searcher, values, corpus, k, temperature, pca=None):
    """Teacher-forced features and gold-token probabilities for every target position."""
    if len(corpus) == 0:
        raise ValueError("gate training needs a non-empty corpus")
    pairs = [(np.asarray(s, dtype=np.int64), np.asarray(t, dtype=np.int64)) for s, t in corpus]
    reprs, p_nmt = model.teacher_force(pairs, return_probs=True)
    gold = np.concatenate([t for _, t in pairs])
    q = pca.transform(reprs) if pca is not None else reprs
    idx, dist = searcher.search(q, k)
    dists = batch_knn_distributions(idx, dist, values, temperature)
    p_knn_gold = np.array([d.as_dict().get(int(g), 0.0) for d, g in zip(dists, gold)])
    p_nmt_gold = p_nmt[np.arange(gold.size), gold]
    return gate_features(q, p_nmt), p_nmt_gold, p_knn_gold


def fit_gate(x, p_nmt_gold, p_knn_gold, hyper):
    """Adam on the interpolated log-likelihood; deterministic for a fixed seed."""
    gate = AdaptiveGate.initialise(x.shape[1], hyper.hidden, hyper.alpha, hyper.seed)
    rng = np.random.default_rng(hyper.seed + 1)
    theta = gate.get_params()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    n = x.shape[0]
    hyper.history.clear()
    hyper.history.append(gate_objective(gate, x, p_nmt_gold, p_knn_gold))
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            sel = perm[start : start + hyper.batch_size]
            _, g = gate_objective_and_grad(gate, x[sel], p_nmt_gold[sel], p_knn_gold[sel])
            t += 1
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            # ascent: the objective is a log-likelihood
            theta = theta + hyper.lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
            gate.set_params(theta)
        hyper.history.append(gate_objective(gate, x, p_nmt_gold, p_knn_gold))
    log.debug("gate objective %.4f -> %.4f", hyper.history[0], hyper.history[-1])
    return gate


def train_gate(model, ds, corpus, hyper=None, pca=None, searcher=None):
    """Fit a gate on teacher-forced steps of ``corpus`` against datastore ``ds``.

    ``ds`` lives in the query space, i.e. it is already reduced when ``pca`` is given.
    """
    hyper = hyper or GateTrainingConfig()
    searcher = searcher or make_searcher(ds)
    x, pn, pk = collect_gate_data(model, searcher, ds.values, corpus, hyper.k, hyper.temperature, pca)
    return fit_gate(x, pn, pk, hyper)


def save_gate(gate, path):
    _binio.write_file(
        path,
        GATE_MAGIC,
        [
            _binio.u32(gate.feature_dim),
            _binio.u32(gate.hidden),
            gate.w1.astype("<f4"),
            gate.b1.astype("<f4"),
            gate.w2.astype("<f4"),
            np.array([gate.b2], dtype="<f4"),
            np.array([gate.alpha], dtype="<f4"),
        ],
    )


def load_gate(path):
    r = _binio.Reader(path, GATE_MAGIC)
    f = r.u32()
    h = r.u32()
    if f == 0 or h == 0:
        raise InvalidHeaderError(f"invalid header: feature_dim={f}, hidden={h}")
    r.require(len(GATE_MAGIC) + 8 + 4 * (h * f + 2 * h + 2))
    w1 = r.array("f4", h * f).reshape(h, f).astype(np.float64)
    b1 = r.array("f4", h).astype(np.float64)
    w2 = r.array("f4", h).astype(np.float64)
    b2 = float(r.array("f4", 1)[0])
    alpha = float(r.array("f4", 1)[0])
    return AdaptiveGate(w1, b1, w2, b2, alpha)
