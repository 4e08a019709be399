"""Multivector retrieval with token-aware centroid training and a centroids-first index."""

from .corpus import QuerySet, TokenVectorCorpus, load_corpus, load_qrels, load_queries, save_corpus
from .engine import SearchParams, exhaustive_maxsim, search
from .index import Index, build_index
from .tac import allocate, assign, compute_token_stats, speedup_lower_bound, train

__version__ = "0.1.0"

__all__ = [
    "Index",
    "QuerySet",
    "SearchParams",
    "TokenVectorCorpus",
    "allocate",
    "assign",
    "build_index",
    "compute_token_stats",
    "exhaustive_maxsim",
    "load_corpus",
    "load_qrels",
    "load_queries",
    "save_corpus",
    "search",
    "speedup_lower_bound",
    "train",
]
