"""Retrieval-verification re-ranking for cloth-changing person re-identification.

The package splits into feature/metadata I/O (:mod:`rvrank.datastore`),
candidate retrieval and pair mining (:mod:`rvrank.retrieval`), the learned
pair verifier (:mod:`rvrank.verifier`), ranking strategies
(:mod:`rvrank.reranker`), evaluation metrics (:mod:`rvrank.evaluation`),
synthetic benchmark generation (:mod:`rvrank.synthgen`) and the command
line front end (:mod:`rvrank.cli`).
"""

__version__ = "0.1.0"
