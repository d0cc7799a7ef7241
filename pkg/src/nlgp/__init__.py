"""Natural-language-guided code prediction toolchain.

Corpus ingest, BPE tokenization, docstring mapping and injection, benchmark
mining, beam-search prediction with an n-gram backend, and code-similarity
metrics.
"""

__version__ = "0.1.0"
