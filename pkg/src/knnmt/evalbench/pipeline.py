"""Method configurations for benchmarking: base, vanilla kNN and the speed-ups.

A method name is ``base``, ``knn``, or a ``+``-joined set of techniques
drawn from ``cache``, ``pca``, ``pruning`` and ``gate``.  The
:class:`Workbench` builds (and memoises) every artifact a method needs so
that benchmark timings only cover decoding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..cache import DEFAULT_TAU, GateTrainingConfig, train_gate
from ..compression import apply_pca, fit_pca, greedy_merge_prune
from ..decoder import DecodeConfig, knn_beam_decode
from ..decoder.model import EOS
from ..retrieval import InterpolationParams
from ..vectorstore import DEFAULT_NPROBE, build_datastore, build_ivf_index, make_searcher
from .bleu import corpus_bleu

log = logging.getLogger(__name__)

TECHNIQUES = ("cache", "pca", "pruning", "gate")
METHODS = ("base", "knn", "cache", "pca", "pruning", "pca+cache", "pca+pruning", "pca+cache+pruning")
ABLATION = ("cache", "pca+cache", "pca+pruning", "pca+cache+pruning")
DEFAULT_TAU_GRID = (0.0, 2.0, 4.0, 6.0, 8.0)


def parse_method(name):
    """Canonical method name and its technique set; unknown names raise ValueError."""
    if name in ("base", "knn"):
        return name, frozenset()
    parts = name.split("+")
    bad = [p for p in parts if p not in TECHNIQUES]
    if bad or not parts or len(set(parts)) != len(parts):
        valid = ", ".join(("base", "knn") + TECHNIQUES)
        raise ValueError(f"invalid method {name!r}; valid: {valid} (techniques may be joined with '+')")
    techs = frozenset(parts)
    return "+".join(t for t in ("pca", "cache", "pruning", "gate") if t in techs), techs


def with_eos(pairs):
    """Append EOS to every target so the datastore also learns where sentences stop."""
    return [(s, np.append(np.asarray(t, dtype=np.int64), EOS)) for s, t in pairs]


@dataclass
class PreparedMethod:
    name: str
    ds: object
    config: DecodeConfig
    searcher: object

    def decode(self, model, sources, batch_size=None):
        cfg = self.config if batch_size is None else replace(self.config, batch_size=batch_size)
        return knn_beam_decode(model, sources, self.ds, cfg, searcher=self.searcher)


@dataclass
class Workbench:
    """Lazily built datastores, indices and models shared by all methods."""

    model: object
    train: list
    valid: list = field(default_factory=list)
    params: InterpolationParams = field(default_factory=InterpolationParams)
    beam_size: int = 5
    tau: float = DEFAULT_TAU
    alpha: float = 0.5
    pca_dim: int | None = None  # None: min(32, repr_dim)
    prune_k: int = 2
    backend: str = "auto"
    nprobe: int = DEFAULT_NPROBE
    append_eos: bool = True
    seed: int = 0

    def __post_init__(self):
        self._memo = {}

    def _get(self, key, build):
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    @property
    def reduced_dim(self):
        return self.pca_dim if self.pca_dim is not None else min(32, self.model.repr_dim)

    def datastore(self, pruned=False):
        if not pruned:
            corpus = with_eos(self.train) if self.append_eos else self.train
            return self._get("ds", lambda: build_datastore(corpus, self.model))
        return self._get("pruned", lambda: greedy_merge_prune(self.datastore(), self.prune_k)[0])

    def pca(self, pruned=False):
        # fit on the store that will be searched: pruning happens first
        return self._get(("pca", pruned), lambda: fit_pca(self.datastore(pruned), self.reduced_dim))

    def store(self, pca, pruned):
        if not pca:
            return self.datastore(pruned)
        return self._get(("reduced", pruned), lambda: apply_pca(self.pca(pruned), self.datastore(pruned)))

    def searcher(self, pca, pruned):
        def build():
            ds = self.store(pca, pruned)
            index = None
            if self.backend == "ivf" or (self.backend == "auto" and len(ds) >= 4096):
                index = build_ivf_index(ds)
            return make_searcher(ds, self.backend, index, self.nprobe)

        return self._get(("searcher", pca, pruned), build)

    def gate(self, pca, pruned):
        def build():
            if not self.valid:
                raise ValueError("the gate needs a validation corpus to train on")
            hyper = GateTrainingConfig(
                k=self.params.k, temperature=self.params.temperature, alpha=self.alpha, seed=self.seed
            )
            return train_gate(
                self.model,
                self.store(pca, pruned),
                self.valid,
                hyper,
                pca=self.pca(pruned) if pca else None,
                searcher=self.searcher(pca, pruned),
            )

        return self._get(("gate", pca, pruned), build)

    def prepare(self, method, batch_size=8, tau=None):
        name, techs = parse_method(method)
        base_cfg = dict(beam_size=self.beam_size, batch_size=batch_size, nprobe=self.nprobe, backend=self.backend)
        if name == "base":
            return PreparedMethod(name, None, DecodeConfig(retrieval=False, **base_cfg), None)
        pca, pruned = "pca" in techs, "pruning" in techs
        cfg = DecodeConfig(
            params=self.params,
            pca=self.pca(pruned) if pca else None,
            tau=(self.tau if tau is None else tau) if "cache" in techs else None,
            gate=self.gate(pca, pruned) if "gate" in techs else None,
            **base_cfg,
        )
        return PreparedMethod(name, self.store(pca, pruned), cfg, self.searcher(pca, pruned))

    def evaluate(self, method, pairs, batch_size=8, tau=None):
        """(BLEU, DecodeStats) of ``method`` on (source, reference) ``pairs``."""
        prepared = self.prepare(method, batch_size, tau)
        hyps, stats = prepared.decode(self.model, [s for s, _ in pairs])
        return corpus_bleu(hyps, [list(t) for _, t in pairs]), stats


@dataclass(frozen=True)
class TauChoice:
    tau: float
    reference_bleu: float
    table: tuple  # ((tau, bleu, search_fraction), ...)


def tune_tau(bench, method, pairs, taus=DEFAULT_TAU_GRID, tolerance=0.5, batch_size=8):
    """Largest cache threshold whose BLEU stays within ``tolerance`` of the cache-free run."""
    name, techs = parse_method(method)
    if "cache" not in techs:
        raise ValueError(f"method {name!r} does not use the cache")
    if not taus:
        raise ValueError("tau grid is empty")
    rest = [t for t in ("pca", "pruning", "gate") if t in techs]
    ref, _ = bench.evaluate("+".join(rest) or "knn", pairs, batch_size)
    table, best = [], None
    for tau in sorted(taus):
        bleu, stats = bench.evaluate(name, pairs, batch_size, tau=tau)
        frac = stats.searches / stats.eligible_steps if stats.eligible_steps else 0.0
        table.append((float(tau), bleu, frac))
        if bleu >= ref - tolerance:
            best = float(tau)
    if best is None:
        best = float(min(taus))
    log.info("tau for %s: %s (reference BLEU %.2f)", name, best, ref)
    return TauChoice(best, ref, tuple(table))
