"""Search self-play: proposer/solver co-training against a lexical retriever.

The package is organized around a small set of composable pieces:

- ``retriever``: BM25 inverted index plus an HTTP search service.
- ``dialogue``: tag grammar for agent turns and trajectory containers.
- ``backends``: text generation behind one interface (scripted, toy, remote).
- ``rollout``: multi-turn episode engine wiring backends to retrieval.
- ``gatekeeper``: rule filter and RAG verification for proposed questions.
- ``adjudicator``: answer normalization and correctness judging.
- ``credit``: toy bigram policy with exact GRPO / REINFORCE gradients.
- ``arena``: the self-play training loop (propose, filter, solve, update).
- ``evalsuite``: fixed-dataset pass@1 evaluation.
- ``factchain``: synthetic linked-entity corpus and toy-policy codec.
- ``config``: flat key/value run configuration with CLI overrides.
- ``cli``: the ``ssp`` command-line entry point.
"""

__version__ = "0.1.0"
