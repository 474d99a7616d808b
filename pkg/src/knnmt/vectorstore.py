"""Key/value datastore with exact and inverted-file k-nearest-neighbour search.

Distances are squared Euclidean, accumulated in float32.  Neighbour lists are
ordered by ascending distance with ties broken by ascending entry index, so
every search in this module is fully deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import DimensionMismatchError, InvalidHeaderError, KnnMtError

log = logging.getLogger(__name__)

DATASTORE_MAGIC = b"KNNDS1"
INDEX_MAGIC = b"KNNIV1"

# below this many entries the default backend scans everything
EXACT_SEARCH_LIMIT = 4096
DEFAULT_NPROBE = 8


class Datastore:
    """Immutable collection of (key vector, token id) pairs."""

    def __init__(self, keys, values):
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values)
        if keys.ndim != 2:
            raise ValueError(f"keys must be a 2-d matrix, got shape {keys.shape}")
        if keys.shape[1] < 1:
            raise ValueError("datastore dimension must be positive")
        if values.ndim != 1 or values.shape[0] != keys.shape[0]:
            raise ValueError(f"{keys.shape[0]} keys but {values.shape} values")
        if values.size and (values.min() < 0 or values.max() > np.iinfo(np.uint32).max):
            raise ValueError("values must fit in an unsigned 32-bit integer")
        if not np.all(np.isfinite(keys)):
            raise ValueError("keys contain NaN or infinite components")
        self.keys = np.ascontiguousarray(keys)
        self.values = np.ascontiguousarray(values, dtype=np.uint32)
        self.keys.flags.writeable = False
        self.values.flags.writeable = False

    @property
    def dim(self):
        return self.keys.shape[1]

    def __len__(self):
        return self.keys.shape[0]

    def __repr__(self):
        return f"Datastore(N={len(self)}, dim={self.dim})"

    def equals(self, other):
        """Bitwise equality of keys and values."""
        return (
            self.keys.shape == other.keys.shape
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )

    def subset(self, mask_or_indices):
        return Datastore(self.keys[mask_or_indices], self.values[mask_or_indices])


@dataclass(frozen=True)
class NeighborSet:
    """Up to k neighbours sorted by (distance, entry index)."""

    indices: np.ndarray
    distances: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.indices)

    def entries(self):
        return [
            (int(i), float(d), int(v))
            for i, d, v in zip(self.indices, self.distances, self.values)
        ]

    @classmethod
    def empty(cls):
        return cls(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float32), np.zeros(0, dtype=np.uint32)
        )


def build_datastore(corpus, model):
    """Teacher-force ``model`` over ``corpus`` and record one entry per target token.

    ``corpus`` is a sequence of (source tokens, target tokens) pairs; tokens are
    either strings from the model vocabulary or integer ids.
    """
    if len(corpus) == 0:
        raise ValueError("cannot build a datastore from an empty corpus")
    pairs = [
        (model.vocab.lookup(src, i), model.vocab.lookup(tgt, i)) for i, (src, tgt) in enumerate(corpus)
    ]
    keys = model.teacher_force(pairs)
    values = np.concatenate([np.asarray(t, dtype=np.int64) for _, t in pairs])
    return Datastore(keys, values)


# -- distance helpers ---------------------------------------------------------


def _check_dim(dim, query):
    if query.shape[-1] != dim:
        raise DimensionMismatchError(dim, query.shape[-1])


def _direct_sqdist(vectors, query):
    """Squared distances accumulated row by row in float32."""
    diff = vectors - query
    return np.einsum("ij,ij->i", diff, diff)


def _top_k(cand_idx, cand_dist, k):
    """Pick the k smallest by (distance, index) from candidate arrays."""
    n = cand_idx.shape[0]
    if n > k:
        kth = np.partition(cand_dist, k - 1)[k - 1]
        keep = np.flatnonzero(cand_dist <= kth)
        cand_idx, cand_dist = cand_idx[keep], cand_dist[keep]
    order = np.lexsort((cand_idx, cand_dist))[:k]
    return cand_idx[order], cand_dist[order]


def _approx_sqdist(queries, keys, key_norms):
    """Expanded-form squared distances; only used to shortlist candidates."""
    q_norms = np.einsum("ij,ij->i", queries, queries)
    d = key_norms[None, :] - 2.0 * (queries @ keys.T)
    d += q_norms[:, None]
    return d, q_norms


def _as_queries(queries, dim):
    q = np.asarray(queries, dtype=np.float32)
    if q.ndim == 1:
        q = q[None, :]
    _check_dim(dim, q)
    return np.ascontiguousarray(q)


# -- exact search ---------------------------------------------------------------


class ExactSearcher:
    """Brute-force scanner; shortlists with a matmul and re-ranks exactly."""

    direct_limit = 2048

    def __init__(self, ds):
        self.ds = ds
        self._norms = np.einsum("ij,ij->i", ds.keys, ds.keys)
        self._max_norm = float(self._norms.max()) if len(ds) else 0.0

    def search(self, queries, k):
        """Return (indices, distances) of shape (Q, min(k, N))."""
        ds = self.ds
        q = _as_queries(queries, ds.dim)
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(ds)
        kk = min(k, n)
        out_i = np.empty((q.shape[0], kk), dtype=np.int64)
        out_d = np.empty((q.shape[0], kk), dtype=np.float32)
        if kk == 0:
            return out_i, out_d
        all_idx = np.arange(n, dtype=np.int64)
        if n <= self.direct_limit:
            for r in range(q.shape[0]):
                out_i[r], out_d[r] = _top_k(all_idx, _direct_sqdist(ds.keys, q[r]), kk)
            return out_i, out_d
        chunk = max(1, (1 << 23) // n)
        for start in range(0, q.shape[0], chunk):
            block = q[start : start + chunk]
            approx, qn = _approx_sqdist(block, ds.keys, self._norms)
            for r in range(block.shape[0]):
                row = approx[r]
                kth = np.partition(row, kk - 1)[kk - 1]
                tol = 1e-4 * (qn[r] + self._max_norm) + 1e-6
                cand = np.flatnonzero(row <= kth + tol)
                d = _direct_sqdist(ds.keys[cand], block[r])
                out_i[start + r], out_d[start + r] = _top_k(cand, d, kk)
        return out_i, out_d


def exact_knn(ds, query, k):
    """The min(k, N) entries nearest to ``query``."""
    query = np.asarray(query, dtype=np.float32)
    if query.ndim != 1:
        raise ValueError("exact_knn takes a single query vector")
    _check_dim(ds.dim, query)
    if len(ds) == 0:
        return NeighborSet.empty()
    idx, dist = ExactSearcher(ds).search(query, k)
    return NeighborSet(idx[0], dist[0], ds.values[idx[0]])


# -- inverted file index ----------------------------------------------------------


class IvfIndex:
    """Coarse k-means partition of a datastore's keys."""

    def __init__(self, centroids, assignments):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        self.assignments = np.asarray(assignments, dtype=np.int64)
        n_clusters = self.centroids.shape[0]
        self.order = np.argsort(self.assignments, kind="stable")
        counts = np.bincount(self.assignments, minlength=n_clusters)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    def cluster(self, c):
        return self.order[self.offsets[c] : self.offsets[c + 1]]

    @property
    def lists(self):
        return [self.cluster(c) for c in range(self.n_clusters)]

    def probe(self, queries, nprobe):
        """Cluster ids of the ``nprobe`` nearest centroids, per query."""
        norms = np.einsum("ij,ij->i", self.centroids, self.centroids)
        approx, _ = _approx_sqdist(queries, self.centroids, norms)
        ids = np.arange(self.n_clusters)
        out = np.empty((queries.shape[0], nprobe), dtype=np.int64)
        for r in range(queries.shape[0]):
            out[r] = _top_k(ids, approx[r], nprobe)[0]
        return out


def default_n_clusters(n):
    return max(1, int(round(math.sqrt(n))))


def _assign(keys, centroids):
    """Nearest centroid per key (float64 arithmetic, first index wins ties)."""
    c64 = centroids.astype(np.float64)
    c_norms = np.einsum("ij,ij->i", c64, c64)
    n = keys.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    chunk = max(1, (1 << 22) // max(1, centroids.shape[0]))
    for start in range(0, n, chunk):
        block = keys[start : start + chunk].astype(np.float64)
        d = c_norms[None, :] - 2.0 * (block @ c64.T)
        d += np.einsum("ij,ij->i", block, block)[:, None]
        lab = np.argmin(d, axis=1)
        labels[start : start + chunk] = lab
        dists[start : start + chunk] = np.maximum(d[np.arange(len(lab)), lab], 0.0)
    return labels, dists


def kmeans(keys, n_clusters, iters=10):
    """Deterministic Lloyd iterations seeded from evenly spaced entries."""
    n, dim = keys.shape
    step = n // n_clusters
    centroids = keys[np.arange(n_clusters) * step].astype(np.float64)
    for _ in range(iters):
        labels, dists = _assign(keys, centroids)
        counts = np.bincount(labels, minlength=n_clusters)
        sums = np.stack(
            [np.bincount(labels, weights=keys[:, j], minlength=n_clusters) for j in range(dim)], axis=1
        )
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            # farthest points from their own centroid, largest first
            far = np.lexsort((np.arange(n), -dists))[: empty.size]
            centroids[empty] = keys[far]
    labels, _ = _assign(keys, centroids)
    return centroids.astype(np.float32), labels


def build_ivf_index(ds, n_clusters=None, kmeans_iters=10):
    n = len(ds)
    if n_clusters is None:
        n_clusters = default_n_clusters(n)
    if n_clusters < 1 or n_clusters > n:
        raise ValueError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    if kmeans_iters < 1:
        raise ValueError("kmeans_iters must be >= 1")
    centroids, labels = kmeans(ds.keys, n_clusters, kmeans_iters)
    log.debug("built IVF index: %d clusters over %d entries", n_clusters, n)
    return IvfIndex(centroids, labels)


class IvfSearcher:
    """Probe-limited search; keys are copied into cluster order for contiguous scans."""

    def __init__(self, index, ds, nprobe=DEFAULT_NPROBE):
        if index.dim != ds.dim:
            raise DimensionMismatchError(ds.dim, index.dim, what="index")
        if index.assignments.shape[0] != len(ds):
            raise ValueError("index does not cover this datastore")
        if not 1 <= nprobe <= index.n_clusters:
            raise ValueError(f"nprobe must be in [1, {index.n_clusters}], got {nprobe}")
        self.index = index
        self.ds = ds
        self.nprobe = nprobe
        self._sorted_keys = ds.keys[index.order]

    def search(self, queries, k):
        """Return (indices, distances) of shape (Q, k); short rows pad with -1 / inf."""
        index = self.index
        q = _as_queries(queries, self.ds.dim)
        if k < 1:
            raise ValueError("k must be >= 1")
        out_i = np.full((q.shape[0], k), -1, dtype=np.int64)
        out_d = np.full((q.shape[0], k), np.inf, dtype=np.float32)
        probes = index.probe(q, self.nprobe)
        for r in range(q.shape[0]):
            spans = [(index.offsets[c], index.offsets[c + 1]) for c in probes[r]]
            cand = np.concatenate([index.order[a:b] for a, b in spans])
            if cand.size == 0:
                continue
            vecs = np.concatenate([self._sorted_keys[a:b] for a, b in spans])
            idx, dist = _top_k(cand, _direct_sqdist(vecs, q[r]), k)
            out_i[r, : idx.size] = idx
            out_d[r, : idx.size] = dist
        return out_i, out_d


def ivf_search(index, ds, query, k, nprobe=DEFAULT_NPROBE):
    """Exact search restricted to the ``nprobe`` clusters nearest to ``query``."""
    query = np.asarray(query, dtype=np.float32)
    if query.ndim != 1:
        raise ValueError("ivf_search takes a single query vector")
    _check_dim(index.dim, query)
    if not 1 <= nprobe <= index.n_clusters:
        raise ValueError(f"nprobe must be in [1, {index.n_clusters}], got {nprobe}")
    probes = index.probe(query[None, :], nprobe)[0]
    cand = np.concatenate([index.cluster(c) for c in probes])
    if cand.size == 0:
        return NeighborSet.empty()
    idx, dist = _top_k(cand, _direct_sqdist(ds.keys[cand], query), k)
    return NeighborSet(idx, dist, ds.values[idx])


def make_searcher(ds, backend="auto", index=None, nprobe=DEFAULT_NPROBE):
    """Pick a search backend: ``exact``, ``ivf`` or ``auto`` (exact below 4,096 entries)."""
    if backend == "auto":
        backend = "exact" if len(ds) < EXACT_SEARCH_LIMIT else "ivf"
    if backend == "exact":
        return ExactSearcher(ds)
    if backend == "ivf":
        if index is None:
            index = build_ivf_index(ds)
        return IvfSearcher(index, ds, min(nprobe, index.n_clusters))
    raise ValueError(f"unknown search backend {backend!r}; expected exact, ivf or auto")


# -- persistence ------------------------------------------------------------------------


def save_datastore(ds, path):
    _binio.write_file(
        path,
        DATASTORE_MAGIC,
        [_binio.u32(ds.dim), _binio.u64(len(ds)), ds.keys.astype("<f4"), ds.values.astype("<u4")],
    )


def load_datastore(path):
    r = _binio.Reader(path, DATASTORE_MAGIC)
    dim = r.u32()
    n = r.u64()
    if dim == 0:
        raise InvalidHeaderError("invalid header: dim must be positive")
    r.require(len(DATASTORE_MAGIC) + 12 + n * dim * 4 + n * 4)
    keys = r.array("f4", n * dim).reshape(n, dim)
    values = r.array("u4", n)
    return Datastore(keys, values)


def save_index(index, path):
    chunks = [_binio.u32(index.n_clusters), _binio.u32(index.dim), index.centroids.astype("<f4")]
    for c in range(index.n_clusters):
        members = index.cluster(c)
        chunks.append(_binio.u64(members.size))
        chunks.append(members.astype("<u8"))
    _binio.write_file(path, INDEX_MAGIC, chunks)


def load_index(path):
    r = _binio.Reader(path, INDEX_MAGIC)
    n_clusters = r.u32()
    dim = r.u32()
    if n_clusters == 0 or dim == 0:
        raise InvalidHeaderError("invalid header: n_clusters and dim must be positive")
    centroids = r.array("f4", n_clusters * dim).reshape(n_clusters, dim)
    lists = [r.array("u8", r.u64()).astype(np.int64) for _ in range(n_clusters)]
    total = sum(x.size for x in lists)
    assignments = np.full(total, -1, dtype=np.int64)
    for c, members in enumerate(lists):
        if members.size and members.max() >= total:
            raise KnnMtError(f"index entry {members.max()} out of range for {total} entries")
        assignments[members] = c
    if np.any(assignments < 0):
        raise KnnMtError("index lists do not partition the datastore")
    return IvfIndex(centroids, assignments)
