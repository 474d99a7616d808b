"""
Adapting a model to a new domain without training
=================================================

The stub model knows a base word mapping.  Each synthetic domain rewrites a
share of that mapping, so the model is partly wrong there.  A datastore built
from the domain's training split corrects it at decode time.
"""

from knnmt.decoder import DecodeConfig, knn_beam_decode
from knnmt.evalbench import SyntheticDomainSpec, corpus_bleu, generate_domains, make_stub_model, with_eos
from knnmt.retrieval import InterpolationParams
from knnmt.vectorstore import build_datastore

spec = SyntheticDomainSpec(n_train=3000, n_valid=50, n_test=100, n_domains=2, domain_shift=0.25)
domains = generate_domains(spec)
model = make_stub_model(spec)

# One datastore entry per target token, plus one for the end of each sentence.
dom = domains["domain1"]
ds = build_datastore(with_eos(dom.train), model)
print(f"datastore: {len(ds)} entries of dimension {ds.dim}")

sources = [s for s, _ in dom.test]
refs = [list(t) for _, t in dom.test]

# lambda = 0 is plain beam search with the model alone.
for lam in (0.0, 0.3, 0.5, 0.7, 0.9):
    cfg = DecodeConfig(params=InterpolationParams(k=8, lam=lam), batch_size=16)
    hyps, stats = knn_beam_decode(model, sources, ds if lam > 0 else None, cfg)
    print(f"lambda={lam:.1f}: BLEU {corpus_bleu(hyps, refs):6.2f}  searches {stats.searches}")

# A store built from a different domain helps less.
other = build_datastore(with_eos(domains["domain0"].train), model)
hyps, _ = knn_beam_decode(model, sources, other, DecodeConfig(batch_size=16))
print(f"out-of-domain store: BLEU {corpus_bleu(hyps, refs):6.2f}")
