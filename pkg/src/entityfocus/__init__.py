"""Entity-focused passage retrieval.

Sparse BM25 retrieval and oracle-entity mining feed a hashed-feature dual
encoder that scores (query, passage) pairs and re-ranks them with a
learned, importance-weighted passage-entity score.
"""

from .corpus import Entity, Passage, QueryExample, contains_answer, load_corpus, load_queries
from .encoder import EncoderModel
from .evaluation import MetricReport, evaluate_run, mrr_at_k, p_at_k
from .mining import TrainingInstance, entity_gain, mine_training_set, srr
from .scorer import DenseIndex, combined_score, mips_topk, rerank, score_qpe
from .sparse import InvertedIndex, bm25_search, build_index
from .trainer import TrainConfig, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "DenseIndex",
    "EncoderModel",
    "Entity",
    "InvertedIndex",
    "MetricReport",
    "Passage",
    "QueryExample",
    "TrainConfig",
    "TrainingInstance",
    "bm25_search",
    "build_index",
    "combined_score",
    "contains_answer",
    "entity_gain",
    "evaluate_run",
    "gradient_check",
    "load_corpus",
    "load_queries",
    "mine_training_set",
    "mips_topk",
    "mrr_at_k",
    "p_at_k",
    "rerank",
    "score_qpe",
    "srr",
    "train",
]
