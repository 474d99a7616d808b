"""
Making retrieval cheaper
========================

Vanilla retrieval searches the datastore at every decoding step.  Three
independent tricks cut that cost: merging redundant entries, shrinking the
keys with PCA, and reusing distributions for nearby queries within one batch.
"""

from knnmt.evalbench import (
    METHODS,
    SyntheticDomainSpec,
    Workbench,
    Workload,
    bench_throughput,
    generate_domains,
    make_stub_model,
)

spec = SyntheticDomainSpec(n_train=8000, n_valid=50, n_test=80, n_domains=1)
dom = generate_domains(spec)["domain0"]
model = make_stub_model(spec)

# The workbench builds each artifact once and shares it between methods.
bench = Workbench(model, dom.train, dom.valid)
print(f"full store: {len(bench.datastore())} entries; pruned (k=2): {len(bench.datastore(pruned=True))}")
print(f"PCA: {model.repr_dim} -> {bench.reduced_dim} dimensions")

# Translation quality of each configuration.
for method in METHODS:
    bleu, stats = bench.evaluate(method, dom.test)
    frac = stats.searches / stats.eligible_steps if stats.eligible_steps else 0.0
    print(f"{method:>18s}: BLEU {bleu:6.2f}  search fraction {frac:.2f}")

# Throughput, median of three timed runs after a warm-up.
report = bench_throughput(list(METHODS), [8], Workload(bench, [s for s, _ in dom.test]))
knn = report.speed("knn", 8)
for row in report.rows:
    print(f"{row.method:>18s}: {row.tokens_per_second:9.1f} tok/s  ({row.tokens_per_second / knn:.2f}x vanilla)")

# The cache threshold trades searches for exactness.
for tau in (0, 2, 4, 6, 8):
    _, stats = bench.prepare("cache", tau=tau).decode(model, [s for s, _ in dom.test])
    print(f"tau={tau}: {stats.searches / stats.eligible_steps:.1%} of steps search")
