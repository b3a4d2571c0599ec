"""Graph-tokenized generative next-POI recommendation.

Pipeline: ingest check-in logs, build a heterogeneous knowledge graph,
train a graph-supervised residual quantizer that mints structural IDs
for every entity, train a small autoregressive sequence model on
multi-behavior prompts over those IDs, and evaluate top-K recommendation
quality with trie-constrained generation.
"""

__version__ = "0.1.0"
