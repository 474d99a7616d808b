"""Base-model interface and a deterministic hashed-feature stub translation model.

The stub stands in for a real encoder-decoder.  Its decoder representation is
a sum of seeded embeddings of

* the source token currently being translated (the "attended" position),
* hashed target-prefix n-grams (n <= 3),
* a projection of a hashed source summary vector,

and its output distribution is a softmax over a noisy linear readout of that
representation, boosted toward a fixed word-to-word mapping rule.  Everything
is a pure function of (seed, source, prefix).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import VocabularyError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
N_SPECIAL = len(SPECIALS)


class Vocab:
    def __init__(self, words):
        self.itos = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary words must be unique")

    @classmethod
    def synthetic(cls, size):
        return cls(f"w{i}" for i in range(size))

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens):
        """Map tokens to ids; unknown strings become UNK."""
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def lookup(self, tokens, sentence_index=None):
        """Strict mapping: ids or known strings only."""
        out = np.empty(len(tokens), dtype=np.int64)
        for n, t in enumerate(tokens):
            if isinstance(t, str):
                i = self.stoi.get(t)
                if i is None:
                    raise VocabularyError(sentence_index, t)
            else:
                i = int(t)
                if not 0 <= i < len(self):
                    raise VocabularyError(sentence_index, i)
            out[n] = i
        return out


def is_modifier(ids):
    ids = np.asarray(ids)
    return (ids >= N_SPECIAL) & ((ids - N_SPECIAL) % 5 == 0)


def target_order(src_ids):
    """Source position translated at each target position.

    A modifier followed by a non-modifier swaps places with it; everything
    else keeps its position.
    """
    mod = is_modifier(src_ids).tolist()
    n = len(mod)
    order = []
    i = 0
    while i < n:
        if i + 1 < n and mod[i] and not mod[i + 1]:
            order += [i + 1, i]
            i += 2
        else:
            order.append(i)
            i += 1
    return np.array(order, dtype=np.int64)


class BaseModel:
    """Interface for models driving the decoder.

    Subclasses provide ``vocab``, ``repr_dim``, ``encode(src_ids)`` and
    ``step(sources, prefixes) -> (reprs, probs)``; ``teacher_force`` has a
    generic (slow) implementation in terms of ``step``.
    """

    vocab: Vocab
    repr_dim: int

    def encode(self, src_ids):
        raise NotImplementedError

    def step(self, sources, prefixes):
        raise NotImplementedError

    def teacher_force(self, pairs, return_probs=False):
        reprs, probs = [], []
        for src, tgt in pairs:
            enc = self.encode(src)
            prefixes = [np.concatenate([[BOS], tgt[:t]]) for t in range(len(tgt))]
            r, p = self.step([enc] * len(prefixes), prefixes)
            reprs.append(r)
            probs.append(p)
        reprs = np.concatenate(reprs).astype(np.float32)
        if return_probs:
            return reprs, np.concatenate(probs)
        return reprs


_MIX = (
    np.uint64(0x9E3779B97F4A7C15),
    np.uint64(0xBF58476D1CE4E5B9),
    np.uint64(0x94D049BB133111EB),
    np.uint64(0xD6E8FEB86659FD93),
)


def _hash(cols, salt, table_size):
    """Deterministic hash of integer columns into [0, table_size)."""
    start = (int(salt) * int(_MIX[3])) & 0xFFFFFFFFFFFFFFFF
    x = np.full(np.shape(cols[0]), start, dtype=np.uint64)
    for j, c in enumerate(cols):
        x ^= (np.asarray(c).astype(np.uint64) + np.uint64(j + 1)) * _MIX[j % 3]
        x ^= x >> np.uint64(29)
        x *= _MIX[(j + 1) % 3]
    x ^= x >> np.uint64(32)
    return (x % np.uint64(table_size)).astype(np.int64)


@dataclass(frozen=True)
class EncodedSource:
    ids: np.ndarray
    order: np.ndarray
    summary: np.ndarray
    context: np.ndarray  # projected summary, added to every decoder state

    def __len__(self):
        return len(self.ids)

    def aligned(self, t):
        return int(self.ids[self.order[t]]) if t < len(self.ids) else EOS

    def aligned_seq(self, n):
        head = self.ids[self.order[:n]]
        return np.concatenate([head, np.full(n - head.size, EOS, dtype=np.int64)])


class StubModel(BaseModel):
    """Seeded random-feature translation model following ``rule``.

    ``rule[w]`` is the target id the model prefers for source id ``w``.
    """

    def __init__(
        self,
        vocab,
        rule,
        seed=0,
        repr_dim=64,
        *,
        confidence=9.0,
        noise=1.0,
        table_size=4096,
        align_norm=9.0,
        align_decay=12.0,
        context_scales=(1.2, 0.8, 0.5),
        summary_scale=1.6,
    ):
        self.vocab = vocab
        self.rule = np.asarray(rule, dtype=np.int64)
        if self.rule.shape != (len(vocab),):
            raise ValueError("rule must give one target id per vocabulary entry")
        self.seed = seed
        self.repr_dim = repr_dim
        self.confidence = confidence
        self.table_size = table_size
        rng = np.random.default_rng([seed, 0x5EED])
        v, d = len(vocab), repr_dim
        # attended-token embeddings with a decaying spectrum
        spectrum = np.exp(-np.arange(d) / align_decay)
        spectrum *= align_norm / np.sqrt(np.sum(spectrum**2))
        basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
        self._align = (rng.standard_normal((v, d)) * spectrum) @ basis.T
        self._ngram = [
            rng.standard_normal((table_size, d)) * (s / np.sqrt(d)) for s in context_scales
        ]
        self._source_table = rng.standard_normal((table_size, d))
        self._summary_proj = rng.standard_normal((d, d)) * (summary_scale / np.sqrt(d))
        self._readout = rng.standard_normal((d, v)) * (noise / (align_norm * 1.05))
        self._blocked = np.array([PAD, BOS, UNK])

    def _salt(self, n):
        return self.seed * 31 + n

    # -- encoder ----------------------------------------------------------------------

    def encode(self, src_ids):
        ids = np.asarray(src_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot encode an empty source sentence")
        ids = np.where((ids >= 0) & (ids < len(self.vocab)), ids, UNK)
        feats = [_hash([ids], self._salt(1), self.table_size)]
        if ids.size > 1:
            feats.append(_hash([ids[:-1], ids[1:]], self._salt(2), self.table_size))
        summary = self._source_table[np.concatenate(feats)].sum(axis=0)
        summary /= np.linalg.norm(summary)
        return EncodedSource(ids, target_order(ids), summary, summary @ self._summary_proj.T)

    # -- decoder ----------------------------------------------------------------------

    def _represent(self, context, aligned, last3):
        """context: (H, d); aligned: (H,); last3: (H, 3) as [y_{t-3}, y_{t-2}, y_{t-1}]."""
        r = context + self._align[aligned]
        a, b, c = last3[:, 0], last3[:, 1], last3[:, 2]
        r += self._ngram[0][_hash([c], self._salt(11), self.table_size)]
        r += self._ngram[1][_hash([b, c], self._salt(12), self.table_size)]
        r += self._ngram[2][_hash([a, b, c], self._salt(13), self.table_size)]
        return r

    def _probs(self, reprs, aligned):
        logits = reprs @ self._readout
        logits[np.arange(len(aligned)), self.rule[aligned]] += self.confidence
        logits[:, self._blocked] = -np.inf
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p

    def step(self, sources, prefixes):
        """One decoder step for each (source, prefix) row; prefixes start with BOS."""
        h = len(prefixes)
        context = np.empty((h, self.repr_dim))
        aligned = np.empty(h, dtype=np.int64)
        last3 = np.full((h, 3), PAD, dtype=np.int64)
        for r, (src, prefix) in enumerate(zip(sources, prefixes)):
            context[r] = src.context
            aligned[r] = src.aligned(len(prefix) - 1)
            tail = prefix[-3:]
            last3[r, 3 - len(tail) :] = tail
        reprs = self._represent(context, aligned, last3)
        return reprs.astype(np.float32), self._probs(reprs, aligned)

    def teacher_force(self, pairs, return_probs=False, chunk=20000):
        """Decoder states (and optionally distributions) for every target position."""
        out_r, out_p = [], []
        batch = []

        def flush():
            context = np.concatenate([np.repeat(e.context[None], len(t), 0) for e, t in batch])
            aligned = np.concatenate([e.aligned_seq(len(t)) for e, t in batch])
            last3 = np.concatenate([_prefix_tails(t) for _, t in batch])
            r = self._represent(context, aligned, last3)
            out_r.append(r.astype(np.float32))
            if return_probs:
                out_p.append(self._probs(r, aligned))
            batch.clear()

        size = 0
        for src, tgt in pairs:
            batch.append((self.encode(src), np.asarray(tgt, dtype=np.int64)))
            size += len(tgt)
            if size >= chunk:
                flush()
                size = 0
        if batch:
            flush()
        reprs = np.concatenate(out_r) if out_r else np.zeros((0, self.repr_dim), np.float32)
        if return_probs:
            probs = np.concatenate(out_p) if out_p else np.zeros((0, len(self.vocab)))
            return reprs, probs
        return reprs


def _prefix_tails(tgt):
    """Rows [y_{t-3}, y_{t-2}, y_{t-1}] for t = 0..len-1 with prefix BOS + tgt."""
    prefix = np.concatenate([[PAD, PAD, BOS], tgt])
    n = len(tgt)
    return np.stack([prefix[0:n], prefix[1 : n + 1], prefix[2 : n + 2]], axis=1)


def stub_encode(model, src_ids):
    """Unit-norm source summary vector."""
    return model.encode(src_ids).summary


def stub_step(model, source, prefix):
    """(representation, distribution) for a single prefix."""
    r, p = model.step([source], [np.asarray(prefix)])
    return r[0], p[0]
