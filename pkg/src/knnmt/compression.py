"""Datastore shrinking: greedy same-value merging and PCA key compression."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .errors import DimensionMismatchError, InvalidHeaderError
from .vectorstore import (
    DEFAULT_NPROBE,
    Datastore,
    _direct_sqdist,
    _top_k,
    build_ivf_index,
)

log = logging.getLogger(__name__)

PCA_MAGIC = b"KNNPC1"

# neighbour lists come from an exact scan up to this many entries, IVF above
PRUNE_EXACT_LIMIT = 100_000


@dataclass
class PruneReport:
    original_size: int
    pruned_size: int
    merges_performed: int
    k_used: int
    kept: np.ndarray = field(repr=False, default=None)
    merges: list = field(repr=False, default_factory=list)

    def summary(self):
        return (
            f"pruned {self.original_size} -> {self.pruned_size} entries "
            f"({self.merges_performed} merges, k={self.k_used})"
        )


def _exact_neighbor_lists(keys, width):
    """Row i: the ``width`` nearest other entries of entry i, by (distance, index)."""
    n = keys.shape[0]
    m = min(n - 1, width + 8)
    norms = np.einsum("ij,ij->i", keys, keys)
    out = np.empty((n, width), dtype=np.int64)
    chunk = max(1, (1 << 23) // n)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        block = keys[rows]
        approx = norms[None, :] - 2.0 * (block @ keys.T)
        approx[np.arange(rows.size), rows] = np.inf
        cand = np.argpartition(approx, m - 1, axis=1)[:, :m]
        diff = keys[cand] - block[:, None, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        order = np.lexsort((cand, d), axis=-1)[:, :width]
        out[rows] = np.take_along_axis(cand, order, axis=1)
    return out


def _ivf_neighbor_lists(keys, width, index, nprobe):
    """Approximate lists: members of a cluster share the probes of their centroid."""
    n = keys.shape[0]
    out = np.full((n, width), -1, dtype=np.int64)
    norms = np.einsum("ij,ij->i", keys, keys)
    probes = index.probe(index.centroids, min(nprobe, index.n_clusters))
    for c in range(index.n_clusters):
        members = index.cluster(c)
        if members.size == 0:
            continue
        cand = np.sort(np.concatenate([index.cluster(p) for p in probes[c]]))
        approx = norms[cand][None, :] - 2.0 * (keys[members] @ keys[cand].T)
        approx[members[:, None] == cand[None, :]] = np.inf
        w = min(width, cand.size - 1)
        if w <= 0:
            continue
        part = np.argpartition(approx, w - 1, axis=1)[:, :w]
        sub = np.take_along_axis(approx, part, axis=1)
        order = np.lexsort((cand[part], sub), axis=-1)
        out[members, :w] = cand[np.take_along_axis(part, order, axis=1)]
    return out


def greedy_merge_prune(ds, k, exact_limit=PRUNE_EXACT_LIMIT, nprobe=DEFAULT_NPROBE):
    """Remove entries that share a value with a nearby surviving entry.

    Entries are visited in index order.  Each surviving entry looks at its k
    nearest not-yet-removed neighbours and removes those with a larger index
    and the same value, unless they have already absorbed another entry.
    Survivors keep their keys and relative order.
    """
    n = len(ds)
    if n == 0:
        raise ValueError("cannot prune an empty datastore")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the datastore size {n}")
    keys = ds.keys
    width = min(n - 1, 3 * k + 8)
    index = None
    if n <= exact_limit:
        lists = _exact_neighbor_lists(keys, width)
    else:
        index = build_ivf_index(ds)
        lists = _ivf_neighbor_lists(keys, width, index, nprobe)

    def refill(i):
        # the precomputed list ran dry; search the survivors directly
        if index is None:
            cand = np.flatnonzero(~removed_arr)
        else:
            probes = index.probe(keys[i][None, :], min(nprobe, index.n_clusters))[0]
            cand = np.concatenate([index.cluster(c) for c in probes])
            cand = cand[~removed_arr[cand]]
        cand = cand[cand != i]
        return _top_k(cand, _direct_sqdist(keys[cand], keys[i]), k)[0].tolist()

    values = ds.values.tolist()
    nbr = lists.tolist()
    removed = bytearray(n)
    removed_arr = np.frombuffer(removed, dtype=np.uint8).view(bool)
    absorbed = bytearray(n)
    merges = []
    refills = 0
    n_alive = n
    for i in range(n):
        if removed[i]:
            continue
        alive = [j for j in nbr[i] if j >= 0 and not removed[j]][:k]
        if len(alive) < k and len(alive) < n_alive - 1:
            alive = refill(i)
            refills += 1
        vi = values[i]
        for j in alive:
            if j > i and values[j] == vi and not absorbed[j] and not removed[j]:
                removed[j] = 1
                absorbed[i] = 1
                n_alive -= 1
                merges.append((i, j))
    kept = np.flatnonzero(removed_arr == 0)
    log.debug("greedy merge k=%d: %d merges, %d list refills", k, len(merges), refills)
    report = PruneReport(n, int(kept.size), len(merges), k, kept=kept, merges=merges)
    return ds.subset(kept), report


# -- PCA ------------------------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    projection: np.ndarray
    explained_variance: np.ndarray

    @property
    def input_dim(self):
        return self.projection.shape[0]

    @property
    def output_dim(self):
        return self.projection.shape[1]

    def transform(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatchError(self.input_dim, x.shape[-1])
        z = (x.astype(np.float64) - self.mean) @ self.projection
        return z.astype(np.float32)

    def inverse_transform(self, z):
        return (np.asarray(z, dtype=np.float64) @ self.projection.T + self.mean).astype(np.float32)


def fit_pca(ds, d):
    """Top-d principal directions of the keys, each signed so its largest-magnitude entry is positive."""
    keys = ds.keys
    n, dim = keys.shape
    if not 1 <= d <= dim:
        raise ValueError(f"output dimension d={d} must be in [1, {dim}]")
    if n < 2:
        raise ValueError("PCA needs at least two entries")
    mean = keys.astype(np.float64).mean(axis=0)
    cov = np.zeros((dim, dim))
    for start in range(0, n, 65536):
        block = keys[start : start + 65536].astype(np.float64) - mean
        cov += block.T @ block
    cov /= n - 1
    # LAPACK symmetric solver: deterministic and exact to machine precision
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:d]
    evals = np.clip(evals[order], 0.0, None)
    proj = evecs[:, order]
    lead = np.argmax(np.abs(proj), axis=0)
    signs = np.sign(proj[lead, np.arange(d)])
    signs[signs == 0] = 1.0
    proj = proj * signs
    return PcaModel(mean, proj, evals)


def apply_pca(pca, data):
    """Project a Datastore (keys only) or raw vectors into the reduced space."""
    if isinstance(data, Datastore):
        if data.dim != pca.input_dim:
            raise DimensionMismatchError(pca.input_dim, data.dim, what="datastore")
        return Datastore(pca.transform(data.keys), data.values)
    return pca.transform(data)


def save_pca(pca, path):
    _binio.write_file(
        path,
        PCA_MAGIC,
        [
            _binio.u32(pca.input_dim),
            _binio.u32(pca.output_dim),
            pca.mean.astype("<f4"),
            pca.projection.astype("<f4"),
            pca.explained_variance.astype("<f4"),
        ],
    )


def load_pca(path):
    r = _binio.Reader(path, PCA_MAGIC)
    din = r.u32()
    dout = r.u32()
    if din == 0 or dout == 0 or dout > din:
        raise InvalidHeaderError(f"invalid header: input_dim={din}, output_dim={dout}")
    r.require(len(PCA_MAGIC) + 8 + 4 * (din + din * dout + dout))
    mean = r.array("f4", din).astype(np.float64)
    proj = r.array("f4", din * dout).reshape(din, dout).astype(np.float64)
    ev = r.array("f4", dout).astype(np.float64)
    return PcaModel(mean, proj, ev)
