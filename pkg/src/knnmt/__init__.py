"""Nearest-neighbour augmented decoding with datastore pruning, PCA, caching and adaptive retrieval."""
