"""Multi-facet universal schema: facet embeddings over a sparse
pattern-by-entity-pair co-occurrence matrix, for relation extraction and
unsupervised entailment detection."""

__version__ = "0.1.0"
