"""Desk-scale dense video captioning laboratory.

Implements the full stack over pre-extracted clip features: visual
codebook (mini-batch k-means), co-occurrence counts, GloVe-style semantic
embeddings, vanilla and bi-modal transformers, anchor-based temporal
proposals, and evaluation metrics, orchestrated by the ``dvc`` CLI.
"""

__version__ = "0.1.0"
