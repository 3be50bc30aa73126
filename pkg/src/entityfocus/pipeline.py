"""Two-phase dense retrieval: exact MIPS over ``s_qp``, then entity rerank."""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Entity, Passage, QueryExample, corpus_lookup
from .encoder import EncoderModel, entity_key
from .evaluation import MetricReport, evaluate_run, oracle_entities_of
from .mining import TrainingInstance, mine_training_set
from .scorer import DenseIndex, ScoreBreakdown, mips_topk, rerank
from .trainer import TrainConfig, TrainResult, train


def encode_corpus(model: EncoderModel, passages: Sequence[Passage], batch: int = 1024) -> DenseIndex:
    ordered = sorted(passages, key=lambda p: p.id)
    rows = [model.encode_passages(ordered[i : i + batch]) for i in range(0, len(ordered), batch)]
    return DenseIndex([p.id for p in ordered], np.vstack(rows))


def retrieve(
    model: EncoderModel,
    queries: Iterable[QueryExample],
    dense: DenseIndex,
    lam: float = 1.0,
    depth: int = 80,
    query_vectors: Mapping[str, np.ndarray] | None = None,
    entity_vectors: Mapping[str, np.ndarray] | None = None,
) -> dict[str, list[tuple[str, ScoreBreakdown]]]:
    """MIPS top-``depth`` for each query, reranked with the combined score.

    Query and entity features come from ``model`` unless precomputed
    vectors are given (entity rows keyed by :func:`entity_key`).
    """
    out = {}
    for q in queries:
        f_q = query_vectors[q.id] if query_vectors is not None else model.encode_query(q)
        cands = mips_topk(dense, f_q, depth)
        if q.entities:
            if entity_vectors is not None:
                F_e = np.stack([entity_vectors[entity_key(q.id, e)] for e in q.entities])
            else:
                F_e = model.encode_entities(q.entities, q)
            ents = [(e.text, F_e[i]) for i, e in enumerate(q.entities)]
        else:
            ents = []
        out[q.id] = rerank(cands, model, f_q, dense, ents, lam)
    return out


def as_run(results: Mapping[str, Sequence[tuple[str, ScoreBreakdown]]]) -> dict[str, list[str]]:
    return {qid: [pid for pid, _ in hits] for qid, hits in results.items()}


def as_scored(results: Mapping[str, Sequence[tuple[str, ScoreBreakdown]]]) -> dict[str, list[tuple[str, float]]]:
    return {qid: [(pid, bd.combined) for pid, bd in hits] for qid, hits in results.items()}


def label_oracles(queries: Sequence[QueryExample], instances_or_scores) -> list[QueryExample]:
    """Copy oracle labels mined for each (query, entity) onto the queries."""
    labels: dict[tuple[str, str, str], bool] = {}
    for item in instances_or_scores:
        for e in item.entities:
            labels[(item.query_id, e.text, e.source)] = bool(e.oracle_label)
    return [
        q.replace_entities(
            e.with_label(labels[(q.id, e.text, e.source)]) if (q.id, e.text, e.source) in labels else e
            for e in q.entities
        )
        for q in queries
    ]


def evaluate_model(
    model: EncoderModel,
    queries: Sequence[QueryExample],
    passages: Sequence[Passage] | Mapping[str, Passage],
    lam: float = 1.0,
    depth: int = 80,
    k: int = 5,
    dense: DenseIndex | None = None,
    name: str = "run",
) -> MetricReport:
    corpus = passages if isinstance(passages, Mapping) else corpus_lookup(passages)
    dense = dense or encode_corpus(model, list(corpus.values()))
    run = as_run(retrieve(model, queries, dense, lam, depth))
    return evaluate_run(run, {q.id: q for q in queries}, corpus, k, oracle_entities_of(queries), name)


def backbone_config(config: TrainConfig) -> TrainConfig:
    """Same schedule with the entity losses switched off and lambda = 0."""
    return replace(config, w_qpe=0.0, w_ent=0.0, lam=0.0)


def fit(
    instances: Sequence[TrainingInstance],
    queries: Sequence[QueryExample],
    config: TrainConfig,
    hash_dim: int = 4096,
    dim: int = 64,
    init_seed: int | None = None,
) -> TrainResult:
    model = EncoderModel.initialize(hash_dim, dim, seed=config.seed if init_seed is None else init_seed)
    return train(model, instances, config, {q.id: q for q in queries})
