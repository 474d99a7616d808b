"""
Skipping retrieval when it is not needed
========================================

A small MLP reads the decoder state and the model's confidence and predicts
how much weight retrieval deserves.  Steps whose prediction falls at or
below a threshold alpha skip the search entirely.
"""

from knnmt.cache import GateTrainingConfig, train_gate
from knnmt.decoder import DecodeConfig, knn_beam_decode
from knnmt.evalbench import SyntheticDomainSpec, corpus_bleu, generate_domains, make_stub_model, with_eos
from knnmt.vectorstore import build_datastore

spec = SyntheticDomainSpec(n_train=3000, n_valid=200, n_test=100, n_domains=1)
dom = generate_domains(spec)["domain0"]
model = make_stub_model(spec)
# A deliberately small store: retrieval is right for common words and wrong
# for rare ones, which gives the gate something to learn.
ds = build_datastore(with_eos(dom.train[:300]), model)

# The gate is fitted on the validation split, never on the test split.
hyper = GateTrainingConfig(epochs=20)
gate = train_gate(model, ds, dom.valid, hyper)
print(f"objective: {hyper.history[0]:.4f} -> {hyper.history[-1]:.4f}")

sources = [s for s, _ in dom.test]
refs = [list(t) for _, t in dom.test]
hyps, _ = knn_beam_decode(model, sources, None, DecodeConfig(retrieval=False, batch_size=16))
print(f"model alone: BLEU {corpus_bleu(hyps, refs):6.2f}")
hyps, _ = knn_beam_decode(model, sources, ds, DecodeConfig(batch_size=16))
print(f"always retrieve (lambda=0.7): BLEU {corpus_bleu(hyps, refs):6.2f}")
for alpha in (0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95):
    gate.alpha = float(alpha)
    hyps, stats = knn_beam_decode(model, sources, ds, DecodeConfig(gate=gate, batch_size=16))
    frac = stats.searches / stats.eligible_steps
    print(f"alpha={alpha:.2f}: search fraction {frac:.2f}  BLEU {corpus_bleu(hyps, refs):6.2f}")
