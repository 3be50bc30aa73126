"""Retrieval metrics, entity-source ablations, and report formatting.

A passage counts as gold for a query when it contains one of the query's
answers (see :func:`entityfocus.corpus.contains_answer`); gold is always
recomputed from text, never read from a qrels file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import (
    IMAGE_SOURCES,
    QUESTION_SOURCES,
    SOURCES,
    Passage,
    QueryExample,
    contains_answer,
    contains_phrase,
    normalize_text,
)

Run = Mapping[str, Sequence[str]]


def _gold_flags(
    qid: str, ranked: Sequence[str], queries: Mapping[str, QueryExample], corpus: Mapping[str, Passage], k: int, stem: bool
) -> list[bool]:
    try:
        answers = queries[qid].answers
    except KeyError:
        raise KeyError(f"query {qid!r} in run has no gold definition") from None
    return [contains_answer(corpus[pid], answers, stem) for pid in ranked[:k]]


def reciprocal_rank(flags: Sequence[bool]) -> float:
    for i, f in enumerate(flags, start=1):
        if f:
            return 1.0 / i
    return 0.0


def mrr_at_k(run: Run, queries: Mapping[str, QueryExample], corpus: Mapping[str, Passage], k: int = 5, stem: bool = False) -> float:
    """Mean over queries of 1/rank of the first gold passage in the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not run:
        return 0.0
    return float(np.mean([reciprocal_rank(_gold_flags(q, r, queries, corpus, k, stem)) for q, r in run.items()]))


def p_at_k(run: Run, queries: Mapping[str, QueryExample], corpus: Mapping[str, Passage], k: int = 5, stem: bool = False) -> float:
    """Mean over queries of (gold passages in the top ``k``) / ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not run:
        return 0.0
    return float(np.mean([sum(_gold_flags(q, r, queries, corpus, k, stem)) / k for q, r in run.items()]))


def oracle_entity_hits(
    run: Run, oracle_entities: Mapping[str, Iterable[str]], corpus: Mapping[str, Passage], k: int = 5, stem: bool = False
) -> dict[str, tuple[int, int]]:
    """Per query: (oracle entities found in some top-k passage, oracle entities)."""
    out = {}
    for qid, ents in oracle_entities.items():
        ents = list(ents)
        if not ents:
            continue
        top = [corpus[pid] for pid in run.get(qid, [])[:k]]
        found = sum(any(contains_phrase(p, e, stem) for p in top) for e in ents)
        out[qid] = (found, len(ents))
    return out


def oracle_entity_recall_at_k(
    run: Run, oracle_entities: Mapping[str, Iterable[str]], corpus: Mapping[str, Passage], k: int = 5, stem: bool = False
) -> float:
    """Global fraction of oracle entities that appear in a top-``k`` passage.

    Returns 0.0 when there are no oracle entities at all.
    """
    hits = oracle_entity_hits(run, oracle_entities, corpus, k, stem)
    total = sum(t for _, t in hits.values())
    return sum(f for f, _ in hits.values()) / total if total else 0.0


def oracle_entities_of(queries: Iterable[QueryExample]) -> dict[str, list[str]]:
    return {q.id: [e.text for e in q.entities if e.oracle_label] for q in queries}


def ablate_entity_sources(queries: Iterable[QueryExample], keep: Iterable[str]) -> list[QueryExample]:
    """Drop every entity whose source is not in ``keep``."""
    keep = set(keep)
    unknown = keep - set(SOURCES)
    if unknown:
        raise ValueError(f"unknown entity source(s): {sorted(unknown)}")
    return [q.replace_entities(e for e in q.entities if e.source in keep) for q in queries]


SOURCE_GROUPS = {
    "none": frozenset(),
    "image": IMAGE_SOURCES,
    "question": QUESTION_SOURCES,
    "full": frozenset(SOURCES),
}


def parse_sources(spec: str) -> frozenset[str]:
    """``"full"``, ``"image"``, ``"none"``, or a comma list such as ``"tag,caption"``."""
    spec = spec.strip()
    if spec in SOURCE_GROUPS:
        return SOURCE_GROUPS[spec]
    keep = frozenset(s.strip() for s in spec.split(",") if s.strip())
    unknown = keep - set(SOURCES)
    if unknown:
        raise ValueError(f"unknown entity source(s): {sorted(unknown)}")
    return keep


def is_hard(query: QueryExample, stem: bool = False) -> bool:
    """True when no answer appears among the query's entity texts."""
    ents = {normalize_text(e.text, stem) for e in query.entities}
    return not any(normalize_text(a, stem) in ents for a in query.answers)


def hard_subset(queries: Iterable[QueryExample], stem: bool = False) -> list[QueryExample]:
    return [q for q in queries if is_hard(q, stem)]


def split_half(items: Sequence, seed: int = 0) -> tuple[list, list]:
    """Seeded even split into (validation, test) halves."""
    perm = np.random.default_rng(seed).permutation(len(items))
    half = len(items) // 2
    return [items[i] for i in sorted(perm[:half])], [items[i] for i in sorted(perm[half:])]


def paired_bootstrap(a: Sequence[float], b: Sequence[float], n_resamples: int = 1000, seed: int = 0) -> float:
    """One-sided p-value that mean(a) > mean(b) arose by chance."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    diff = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diff.size, size=(n_resamples, diff.size))
    means = diff[idx].mean(axis=1)
    return float(np.mean(means <= 0.0))


@dataclass
class MetricReport:
    name: str
    k: int
    mrr_at_k: float
    p_at_k: float
    oracle_entity_recall_at_k: float
    oracle_entity_recall_macro: float
    oracle_recall_defined: bool
    n_queries: int
    rows: list[dict] = field(default_factory=list)

    def to_dict(self, with_rows: bool = True) -> dict:
        d = asdict(self)
        if not with_rows:
            d.pop("rows")
        return d


def evaluate_run(
    run: Run,
    queries: Mapping[str, QueryExample],
    corpus: Mapping[str, Passage],
    k: int = 5,
    oracle_entities: Mapping[str, Iterable[str]] | None = None,
    name: str = "run",
    stem: bool = False,
) -> MetricReport:
    rows = []
    for qid, ranked in run.items():
        flags = _gold_flags(qid, ranked, queries, corpus, k, stem)
        rows.append({"query_id": qid, "rr": reciprocal_rank(flags), "precision": sum(flags) / k})
    hits = oracle_entity_hits(run, oracle_entities or {}, corpus, k, stem)
    total = sum(t for _, t in hits.values())
    for row in rows:
        f, t = hits.get(row["query_id"], (0, 0))
        row["oracle_found"], row["oracle_total"] = f, t
    return MetricReport(
        name=name,
        k=k,
        mrr_at_k=float(np.mean([r["rr"] for r in rows])) if rows else 0.0,
        p_at_k=float(np.mean([r["precision"] for r in rows])) if rows else 0.0,
        oracle_entity_recall_at_k=sum(f for f, _ in hits.values()) / total if total else 0.0,
        oracle_entity_recall_macro=float(np.mean([f / t for f, t in hits.values()])) if hits else 0.0,
        oracle_recall_defined=total > 0,
        n_queries=len(rows),
        rows=rows,
    )


def format_table(reports: Sequence[MetricReport]) -> str:
    """Aligned plain-text comparison of several runs."""
    if not reports:
        return ""
    k = reports[0].k
    header = ["run", f"MRR@{k}", f"P@{k}", f"OER@{k}", "queries"]
    body = [
        [
            r.name,
            f"{r.mrr_at_k:.4f}",
            f"{r.p_at_k:.4f}",
            f"{r.oracle_entity_recall_at_k:.4f}" if r.oracle_recall_defined else "n/a",
            str(r.n_queries),
        ]
        for r in reports
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines)


def reports_json(reports: Sequence[MetricReport], with_rows: bool = True) -> str:
    return json.dumps([r.to_dict(with_rows) for r in reports], indent=2)
