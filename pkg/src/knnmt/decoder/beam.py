"""Lockstep beam search with retrieval-augmented next-token distributions."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..cache import DistributionCache, gate_features
from ..errors import DimensionMismatchError
from ..retrieval import InterpolationParams, batch_knn_distributions
from ..vectorstore import DEFAULT_NPROBE, make_searcher
from .model import BOS, EOS


@dataclass
class DecodeConfig:
    beam_size: int = 5
    max_len: int | None = None  # None: 2 * source length + 10
    params: InterpolationParams = field(default_factory=InterpolationParams)
    pca: object = None
    tau: float | None = None  # None disables the cache
    gate: object = None
    backend: str = "auto"
    nprobe: int = DEFAULT_NPROBE
    index: object = None
    batch_size: int = 1
    retrieval: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def uses_retrieval(self):
        return self.retrieval and (self.params.lam > 0 or self.gate is not None)


@dataclass
class DecodeStats:
    sentences: int = 0
    steps: int = 0  # hypothesis-steps scored
    eligible_steps: int = 0  # hypothesis-steps where retrieval was considered
    searches: int = 0
    cache_hits: int = 0
    gate_skips: int = 0
    tokens: int = 0
    elapsed: float = 0.0
    peak_cache_entries: int = 0

    def counts(self):
        """Everything except wall-clock time."""
        return (
            self.sentences,
            self.steps,
            self.eligible_steps,
            self.searches,
            self.cache_hits,
            self.gate_skips,
            self.tokens,
            self.peak_cache_entries,
        )


@dataclass
class BeamHypothesis:
    tokens: list
    log_score: float
    finished: bool = False


@dataclass(frozen=True)
class DecodeSummary:
    tokens_per_second: float
    search_fraction: float
    cache_hit_fraction: float
    gate_skip_fraction: float


def decode_stats_summary(stats):
    if stats.elapsed <= 0:
        raise ValueError("elapsed time must be positive to compute throughput")
    elig = stats.eligible_steps
    return DecodeSummary(
        tokens_per_second=stats.tokens / stats.elapsed,
        search_fraction=stats.searches / elig if elig else 0.0,
        cache_hit_fraction=stats.cache_hits / elig if elig else 0.0,
        gate_skip_fraction=stats.gate_skips / elig if elig else 0.0,
    )


def select_candidates(scores, logp, beam_size, eos=EOS):
    """Expand ``scores`` (n,) by ``logp`` (n, V).

    Returns (continuing, finished): ``continuing`` holds the ``beam_size``
    best non-EOS extensions as (parent, token, score); ``finished`` holds
    (parent, score) for EOS extensions ranked within the overall top
    ``beam_size``.  Ties rank by flattened (parent, token) position.
    """
    flat = (scores[:, None] + logp).ravel()
    v = logp.shape[1]
    # each parent contributes at most one EOS, so this window always holds
    # beam_size non-EOS candidates (2 * beam_size in the usual n == beam_size case)
    m = min(flat.size, beam_size + scores.shape[0])
    kth = np.partition(flat, flat.size - m)[flat.size - m]
    cand = np.flatnonzero(flat >= kth) if np.isfinite(kth) else np.flatnonzero(np.isfinite(flat))
    cand = cand[np.lexsort((cand, -flat[cand]))]
    continuing, finished = [], []
    for rank, c in enumerate(cand):
        parent, tok = divmod(int(c), v)
        if tok == eos:
            if rank < beam_size:
                finished.append((parent, float(flat[c])))
        elif len(continuing) < beam_size:
            continuing.append((parent, tok, float(flat[c])))
        if len(continuing) >= beam_size and rank >= beam_size - 1:
            break
    return continuing, finished


class _Retriever:
    """Per-step retrieval: gate, cache, batched datastore search, interpolation."""

    def __init__(self, searcher, values, cfg, stats):
        self.searcher = searcher
        self.values = values
        self.cfg = cfg
        self.stats = stats
        self.cache = None

    def new_session(self):
        self.cache = DistributionCache(self.cfg.tau) if self.cfg.tau is not None else None

    def mix(self, reprs, p_nmt):
        cfg, stats = self.cfg, self.stats
        n = reprs.shape[0]
        q = cfg.pca.transform(reprs) if cfg.pca is not None else reprs
        stats.eligible_steps += n
        lam = np.full(n, cfg.params.lam)
        if cfg.gate is not None:
            lam = cfg.gate.forward(gate_features(q, p_nmt))
            on = np.flatnonzero(lam > cfg.gate.alpha)
            stats.gate_skips += n - on.size
        else:
            on = np.arange(n)
        if on.size == 0:
            return p_nmt
        dists = [None] * on.size
        if self.cache is not None:
            hits = self.cache.lookup_batch(q[on])
            for r, j in enumerate(hits):
                if j >= 0:
                    dists[r] = self.cache.distribution(j)
            stats.cache_hits += int(np.count_nonzero(hits >= 0))
        miss = [r for r, d in enumerate(dists) if d is None]
        if miss:
            idx, dist = self.searcher.search(q[on[miss]], cfg.params.k)
            fresh = batch_knn_distributions(idx, dist, self.values, cfg.params.temperature)
            for r, d in zip(miss, fresh):
                dists[r] = d
            stats.searches += len(miss)
            if self.cache is not None:
                # only fresh results go in, so every key maps to its own search
                self.cache.insert(q[on[miss]], fresh)
                stats.peak_cache_entries = max(stats.peak_cache_entries, len(self.cache))
        out = p_nmt.copy()
        for r, d in zip(on, dists):
            if d.empty:
                continue
            out[r] *= 1.0 - lam[r]
            out[r, d.tokens] += lam[r] * d.probs
        return out


def _decode_batch(model, sources, cfg, retriever, stats):
    k = cfg.beam_size
    encs = [model.encode(s) for s in sources]
    max_lens = [cfg.max_len or 2 * len(e) + 10 for e in encs]
    hyps = [[[BOS] for _ in range(k)] for _ in encs]
    # all beams start as copies of BOS; only the first is live
    scores = [np.array([0.0] + [-np.inf] * (k - 1)) for _ in encs]
    finished = [[] for _ in encs]
    active = list(range(len(encs)))
    if retriever is not None:
        retriever.new_session()
    step = 0
    while active:
        row_src, row_prefix = [], []
        for b in active:
            for h in hyps[b]:
                row_src.append(encs[b])
                row_prefix.append(h)
        reprs, p_nmt = model.step(row_src, row_prefix)
        stats.steps += len(row_prefix)
        probs = retriever.mix(reprs, p_nmt) if retriever is not None else p_nmt
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        still = []
        offset = 0
        for b in active:
            n = len(hyps[b])
            cont, fin = select_candidates(scores[b], logp[offset : offset + n], k)
            offset += n
            for parent, sc in fin:
                if len(finished[b]) < k:
                    toks = hyps[b][parent][1:] + [EOS]
                    finished[b].append((sc / len(toks), toks))
            hyps[b] = [hyps[b][p] + [tok] for p, tok, _ in cont]
            scores[b] = np.array([sc for _, _, sc in cont])
            if len(finished[b]) >= k or not cont:
                continue
            if step + 1 >= max_lens[b]:
                for h, sc in zip(hyps[b], scores[b]):
                    finished[b].append((sc / (len(h) - 1), h[1:]))
                continue
            still.append(b)
        active = still
        step += 1
    out = []
    for b in range(len(encs)):
        # best normalised score; earlier-finalised wins ties
        best = max(range(len(finished[b])), key=lambda i: (finished[b][i][0], -i))
        toks = finished[b][best][1]
        stats.tokens += len(toks)
        out.append([t for t in toks if t != EOS])
    stats.sentences += len(encs)
    return out


def knn_beam_decode(model, sources, ds, cfg, searcher=None):
    """Beam-search ``sources`` with retrieval from ``ds``.

    ``ds`` may be None for base-model decoding.  A prebuilt ``searcher`` can be
    passed to keep index preparation out of the timed region.
    """
    stats = DecodeStats()
    retriever = None
    if cfg.uses_retrieval:
        if ds is None:
            raise ValueError("retrieval is enabled but no datastore was given")
        qdim = cfg.pca.output_dim if cfg.pca is not None else model.repr_dim
        if ds.dim != qdim:
            raise DimensionMismatchError(qdim, ds.dim, what="datastore")
        if searcher is None:
            searcher = make_searcher(ds, cfg.backend, cfg.index, cfg.nprobe)
        retriever = _Retriever(searcher, ds.values, cfg, stats)
    sources = [np.asarray(s, dtype=np.int64) for s in sources]
    for i, s in enumerate(sources):
        if s.size == 0:
            raise ValueError(f"source sentence {i} is empty")
    translations = []
    start = time.perf_counter()
    for b in range(0, len(sources), cfg.batch_size):
        translations += _decode_batch(model, sources[b : b + cfg.batch_size], cfg, retriever, stats)
    stats.elapsed = time.perf_counter() - start
    return translations, stats
