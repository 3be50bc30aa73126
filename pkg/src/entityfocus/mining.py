"""Oracle critical-entity mining and training-set construction.

An entity is *critical* when appending it to the BM25 query raises the
summed reciprocal rank of answer-bearing passages by more than a
threshold.  Critical entities also contribute extra positives: the first
retrieved passage that mentions both the entity and an answer.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Entity, Passage, QueryExample, contains_answer, contains_phrase
from .sparse import InvertedIndex, SparseHit, augment_query, bm25_search

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EntityScore:
    entity: Entity
    gain: float
    is_oracle: bool


@dataclass(frozen=True)
class TrainingInstance:
    query_id: str
    positive: Passage
    negative: Passage
    entities: tuple[Entity, ...]

    def record(self) -> dict:
        return {
            "query_id": self.query_id,
            "positive_id": self.positive.id,
            "negative_id": self.negative.id,
            "entities": [
                {"text": e.text, "source": e.source, "oracle": bool(e.oracle_label)}
                for e in self.entities
            ],
        }


def srr(
    ranked: Sequence[SparseHit],
    answers: Iterable[str],
    passages: Mapping[str, Passage],
    stem: bool = False,
) -> float:
    """Summed reciprocal rank of answer-bearing hits."""
    answers = list(answers)
    return float(
        sum(1.0 / hit.rank for hit in ranked if contains_answer(passages[hit.passage_id], answers, stem))
    )


def entity_gain(
    index: InvertedIndex,
    passages: Mapping[str, Passage],
    query: QueryExample,
    entity: Entity,
    k: int = 5,
    theta: float = 0.8,
    stem: bool = False,
    base_srr: float | None = None,
) -> EntityScore:
    """SRR of the entity-augmented query minus SRR of the bare question."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if base_srr is None:
        base_srr = srr(bm25_search(index, augment_query(query.question), k), query.answers, passages, stem)
    hits = bm25_search(index, augment_query(query.question, entity), k)
    gain = srr(hits, query.answers, passages, stem) - base_srr
    return EntityScore(entity, gain, gain > theta)


def score_entities(
    index: InvertedIndex,
    passages: Mapping[str, Passage],
    query: QueryExample,
    k: int = 5,
    theta: float = 0.8,
    stem: bool = False,
) -> list[EntityScore]:
    base = srr(bm25_search(index, augment_query(query.question), k), query.answers, passages, stem)
    return [
        entity_gain(index, passages, query, e, k, theta, stem, base_srr=base) for e in query.entities
    ]


def pair_up(positives: Sequence, negatives: Sequence, rng: np.random.Generator) -> list[tuple]:
    """Shuffle both lists, then cycle the shorter so every item is used."""
    if not positives or not negatives:
        return []
    pos = [positives[i] for i in rng.permutation(len(positives))]
    neg = [negatives[i] for i in rng.permutation(len(negatives))]
    n = max(len(pos), len(neg))
    return [(pos[i % len(pos)], neg[i % len(neg)]) for i in range(n)]


@dataclass
class MinedQuery:
    query: QueryExample
    scores: list[EntityScore]
    positives: list[Passage]
    negatives: list[Passage]
    instances: list[TrainingInstance]


def mine_query(
    index: InvertedIndex,
    passages: Mapping[str, Passage],
    query: QueryExample,
    init_depth: int = 100,
    n_pos: int = 5,
    n_neg: int = 25,
    theta: float = 0.8,
    srr_depth: int = 5,
    seed: int = 0,
    stem: bool = False,
    query_index: int = 0,
) -> MinedQuery:
    scores = score_entities(index, passages, query, srr_depth, theta, stem)
    hits = bm25_search(index, augment_query(query.question), init_depth)
    gold = [passages[h.passage_id] for h in hits if contains_answer(passages[h.passage_id], query.answers, stem)]
    negatives = [passages[h.passage_id] for h in hits if not contains_answer(passages[h.passage_id], query.answers, stem)]
    positives = gold[:n_pos]
    negatives = negatives[:n_neg]

    seen = {p.id for p in positives}
    for s in scores:
        if not s.is_oracle:
            continue
        for h in bm25_search(index, augment_query(query.question, s.entity), init_depth):
            p = passages[h.passage_id]
            if contains_phrase(p, s.entity.text, stem) and contains_answer(p, query.answers, stem):
                if p.id not in seen:
                    seen.add(p.id)
                    positives.append(p)
                break

    labelled = tuple(s.entity.with_label(s.is_oracle) for s in scores)
    rng = np.random.default_rng([seed, query_index])
    instances = [
        TrainingInstance(query.id, pos, neg, labelled) for pos, neg in pair_up(positives, negatives, rng)
    ]
    return MinedQuery(query, scores, positives, negatives, instances)


def mine_training_set(
    index: InvertedIndex,
    passages: Mapping[str, Passage],
    queries: Sequence[QueryExample],
    init_depth: int = 100,
    n_pos: int = 5,
    n_neg: int = 25,
    theta: float = 0.8,
    srr_depth: int = 5,
    seed: int = 0,
    stem: bool = False,
    threads: int = 1,
    details: list[MinedQuery] | None = None,
) -> list[TrainingInstance]:
    """Mine positives/negatives for every query and pair them into instances.

    Queries without any answer-bearing hit (or without any negative) are
    dropped.  Pass a list as ``details`` to also collect the per-query
    mining results, including entity gains.
    """
    if not queries:
        raise ValueError("no queries to mine")
    if n_pos < 1 or n_neg < 1:
        raise ValueError("n_pos and n_neg must be >= 1")

    def run(item):
        qi, q = item
        return mine_query(index, passages, q, init_depth, n_pos, n_neg, theta, srr_depth, seed, stem, qi)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            mined = list(pool.map(run, enumerate(queries)))
    else:
        mined = [run(item) for item in enumerate(queries)]

    instances: list[TrainingInstance] = []
    dropped = 0
    for m in mined:
        if not m.instances:
            dropped += 1
        instances.extend(m.instances)
        if details is not None:
            details.append(m)
    if dropped:
        logger.info("dropped %d of %d queries with no positive or no negative", dropped, len(queries))
    return instances


def write_training_set(instances: Iterable[TrainingInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.record(), ensure_ascii=False) + "\n")


def read_training_set(path: str | Path, passages: Mapping[str, Passage]) -> list[TrainingInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                pos = passages[rec["positive_id"]]
                neg = passages[rec["negative_id"]]
            except KeyError as exc:
                raise ValueError(f"unknown passage id {exc.args[0]!r} at line {lineno}") from None
            ents = tuple(Entity(e["text"], e["source"], bool(e["oracle"])) for e in rec["entities"])
            out.append(TrainingInstance(rec["query_id"], pos, neg, ents))
    return out


def entity_score_records(mined: Iterable[MinedQuery]) -> list[dict]:
    return [
        {
            "query_id": m.query.id,
            "text": s.entity.text,
            "source": s.entity.source,
            "gain": s.gain,
            "oracle": s.is_oracle,
        }
        for m in mined
        for s in m.scores
    ]
