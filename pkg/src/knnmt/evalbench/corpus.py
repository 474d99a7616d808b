"""Synthetic multi-domain translation corpora.

The base task maps each source word to a target word through a fixed
permutation, with modifier/noun swaps (see ``decoder.model.target_order``).
Each domain rewrites a fraction of the word rules and of the word-frequency
ranking, so a datastore built from a domain's training split carries
information the base model lacks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..decoder.model import N_SPECIAL, StubModel, Vocab, target_order


@dataclass(frozen=True)
class SyntheticDomainSpec:
    seed: int = 0
    vocab_size: int = 512
    n_train: int = 50_000
    n_valid: int = 500
    n_test: int = 500
    min_len: int = 8
    max_len: int = 16
    domain_shift: float = 0.25
    n_domains: int = 4
    zipf_exponent: float = 1.0

    def validate(self):
        if self.vocab_size < 16:
            raise ValueError(f"vocab_size must be >= 16, got {self.vocab_size}")
        if min(self.n_train, self.n_valid, self.n_test, self.n_domains) < 1:
            raise ValueError("split sizes and domain count must all be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ValueError(f"domain_shift must lie in [0, 1], got {self.domain_shift}")


@dataclass
class DomainCorpus:
    name: str
    rule: np.ndarray  # source id -> target id for this domain
    train: list
    valid: list
    test: list


def base_rule(vocab_size, seed):
    """Word permutation shared by every domain; specials map to themselves."""
    rng = np.random.default_rng([seed, 1])
    rule = np.arange(vocab_size + N_SPECIAL)
    rule[N_SPECIAL:] = N_SPECIAL + rng.permutation(vocab_size)
    return rule


def _rewrite(perm_like, fraction, rng, offset=0):
    """Re-draw ``fraction`` of the entries of ``perm_like`` (a permutation) among themselves."""
    out = perm_like.copy()
    n = out.size - offset
    m = int(round(fraction * n))
    if m >= 2:
        chosen = offset + np.sort(rng.choice(n, size=m, replace=False))
        out[chosen] = out[chosen][rng.permutation(m)]
    return out


def make_vocab(spec):
    return Vocab.synthetic(spec.vocab_size)


def make_stub_model(spec, repr_dim=64, **kwargs):
    """The stub model that knows the base (unshifted) rule of ``spec``'s task."""
    return StubModel(make_vocab(spec), base_rule(spec.vocab_size, spec.seed), spec.seed, repr_dim, **kwargs)


def _sample_sentences(spec, rank_to_word, n, rng):
    ranks = np.arange(1, spec.vocab_size + 1, dtype=np.float64)
    p = ranks**-spec.zipf_exponent
    p /= p.sum()
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    flat = rng.choice(spec.vocab_size, size=int(lengths.sum()), p=p)
    words = N_SPECIAL + rank_to_word[flat]
    return np.split(words, np.cumsum(lengths)[:-1])


def generate_domains(spec=None):
    """Per-domain (train, valid, test) corpora of (source ids, target ids) pairs."""
    spec = spec or SyntheticDomainSpec()
    spec.validate()
    rule0 = base_rule(spec.vocab_size, spec.seed)
    ranks0 = np.random.default_rng([spec.seed, 2]).permutation(spec.vocab_size)
    out = {}
    for d in range(spec.n_domains):
        drng = np.random.default_rng([spec.seed, 3, d])
        rule = _rewrite(rule0, spec.domain_shift, drng, offset=N_SPECIAL)
        rank_to_word = _rewrite(ranks0, spec.domain_shift, drng)
        # sentence skeletons come from a stream shared by all domains
        srng = np.random.default_rng([spec.seed, 4])
        need = spec.n_train + spec.n_valid + spec.n_test
        seen, sents = set(), []
        while len(sents) < need:
            for s in _sample_sentences(spec, rank_to_word, need - len(sents), srng):
                key = s.tobytes()
                if key not in seen:
                    seen.add(key)
                    sents.append(s)
        pairs = [(s, rule[s[target_order(s)]]) for s in sents]
        a, b = spec.n_train, spec.n_train + spec.n_valid
        out[f"domain{d}"] = DomainCorpus(f"domain{d}", rule, pairs[:a], pairs[a:b], pairs[b:need])
    return out


# -- TSV corpora ---------------------------------------------------------------------------


def write_tsv(pairs, path, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(vocab.decode(src)) + "\t" + " ".join(vocab.decode(tgt)) + "\n")


def read_tsv(path):
    """Sentence pairs as whitespace-split token lists."""
    pairs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{n + 1}: expected 'source<TAB>target'")
        src, tgt = line.split("\t", 1)
        pairs.append((src.split(), tgt.split()))
    return pairs
