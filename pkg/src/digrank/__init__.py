"""Document-information-gain reranking for retrieval-augmented generation.

Stages, each usable on its own and composable through JSONL files:

* ``lm_gateway`` - per-token answer probabilities from an LM (mock or HTTP)
* ``confidence`` - smoothed, head-weighted answer confidence
* ``dig`` - information gain of a document and the collection loop
* ``dataset`` - CE pairs and margin groups from scored triplets
* ``scorer`` / ``losses`` / ``trainer`` - the reranker and its training
* ``retrieval`` / ``inference`` - BM25 candidates, rerank-filter-answer, EM
* ``world`` - synthetic corpora with planted helpful/misleading/neutral docs
"""

__version__ = "0.1.0"
