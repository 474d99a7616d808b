"""
Retrieval distributions by hand
===============================

A datastore pairs decoder states with the target token that followed them.
At decode time the nearest entries vote for their tokens, and the vote is
mixed into the model's own distribution.
"""

import numpy as np

from knnmt.retrieval import interpolate, knn_distribution
from knnmt.vectorstore import Datastore, exact_knn

# Six 2-d keys.  Tokens 10 and 11 sit in two loose groups.
keys = np.array([[0.0, 0.0], [0.3, 0.1], [0.2, -0.2], [3.0, 3.0], [3.1, 2.8], [0.1, 0.4]], np.float32)
values = np.array([10, 10, 10, 11, 11, 11])
ds = Datastore(keys, values)

# Squared Euclidean search; ties would go to the smaller index.
query = np.array([0.1, 0.1])
neighbours = exact_knn(ds, query, k=4)
for idx, dist, tok in neighbours.entries():
    print(f"entry {idx}: distance {dist:.3f}, token {tok}")

# A softmax over negative distances, summed per token.  The temperature
# controls how sharply the closest entry dominates.
for t in (0.01, 0.1, 10.0):
    p = knn_distribution(neighbours, t)
    print(f"T={t:<5g} p_knn = {p.as_dict()}")

# Mix with a model that prefers token 11.
vocab = 16
p_model = np.full(vocab, 0.01)
p_model[11] = 1.0 - 0.01 * (vocab - 1)
p_knn = knn_distribution(neighbours, 0.1)
for lam in (0.0, 0.5, 0.7, 1.0):
    mixed = interpolate(p_model, p_knn, lam)
    print(f"lambda={lam:.1f}: p(10)={mixed[10]:.3f} p(11)={mixed[11]:.3f}")
