"""Retrieval scores, exact maximum-inner-product search, and reranking.

The final relevance of passage ``p`` for query ``q`` is

    s_qp + lam * s_qpe

where ``s_qp`` is the plain inner product of query and passage features and
``s_qpe`` averages passage-entity scores, each entity weighted by the
sigmoid of its query-entity score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .encoder import EncoderModel


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def score_qp(f_q, f_p) -> float:
    f_q, f_p = _vec(f_q), _vec(f_p)
    if f_q.shape != f_p.shape:
        raise ValueError(f"dimension mismatch: {f_q.shape} vs {f_p.shape}")
    return float(f_q @ f_p)


def score_qe(model: EncoderModel, f_q, f_e) -> float:
    return score_qp(model.head("head_query", f_q), model.head("head_entity", f_e))


def score_pe(model: EncoderModel, f_p, f_e) -> float:
    return score_qp(model.head("head_passage", f_p), model.head("head_entity", f_e))


def entity_weights(q_scores: Sequence[float]) -> np.ndarray:
    """Normalized sigmoid weights; empty input gives an empty array."""
    w = expit(_vec(q_scores))
    return w / w.sum() if w.size else w


def score_qpe(q_scores: Sequence[float], p_scores: Sequence[float]) -> float:
    """Entity-focused score; 0.0 for an empty entity set."""
    q_scores, p_scores = _vec(q_scores), _vec(p_scores)
    if q_scores.shape != p_scores.shape:
        raise ValueError("query-entity and passage-entity score lists differ in length")
    if q_scores.size == 0:
        return 0.0
    return float(entity_weights(q_scores) @ p_scores)


def combined_score(s_qp: float, s_qpe: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return s_qp + lam * s_qpe


@dataclass
class ScoreBreakdown:
    s_qp: float
    s_qpe: float
    combined: float
    lam: float
    per_entity: list[tuple[str, float, float, float]] = field(default_factory=list)

    def record(self) -> dict:
        return {
            "s_qp": self.s_qp,
            "s_qpe": self.s_qpe,
            "combined": self.combined,
            "lambda": self.lam,
            "per_entity": [
                {"text": t, "s_qe": qe, "weight": w, "s_pe": pe} for t, qe, w, pe in self.per_entity
            ],
        }


class DenseIndex:
    """Row-per-passage embedding matrix searched by brute force."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError("matrix must have one row per id")
        if len(set(ids)) != len(ids):
            raise ValueError("dense index ids must be unique")
        if not np.isfinite(matrix).all():
            raise ValueError("dense index rows must be finite")
        self.ids = list(ids)
        self.matrix = matrix
        # position of each row in ascending-id order, for tie-breaking
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(ids))
        self._row = {pid: i for i, pid in enumerate(self.ids)}

    @classmethod
    def from_mapping(cls, vectors: Mapping[str, np.ndarray]) -> DenseIndex:
        ids = sorted(vectors)
        return cls(ids, np.stack([vectors[i] for i in ids]) if ids else np.zeros((0, 0)))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, pid: str) -> np.ndarray:
        return self.matrix[self._row[pid]]

    def vectors(self, pids: Sequence[str]) -> np.ndarray:
        return self.matrix[[self._row[p] for p in pids]]

    def as_mapping(self) -> dict[str, np.ndarray]:
        return {pid: self.matrix[i] for i, pid in enumerate(self.ids)}


def mips_topk(index: DenseIndex, f_q, k: int) -> list[tuple[str, float]]:
    """Exact top-``k`` rows by inner product; ties go to the smaller id."""
    if len(index) == 0:
        raise ValueError("cannot search an empty dense index")
    if k < 1:
        raise ValueError("k must be >= 1")
    f_q = _vec(f_q)
    if f_q.shape != (index.dim,):
        raise ValueError(f"query dimension {f_q.shape} does not match index dimension {index.dim}")
    scores = index.matrix @ f_q
    n = scores.shape[0]
    if k < n:
        # everything at or above the k-th largest value, so boundary ties survive
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((index._id_rank[cand], -scores[cand]))][:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def entity_scores(model: EncoderModel, f_q, passage_vecs: np.ndarray, entity_vecs: np.ndarray):
    """Query-entity scores (m,) and passage-entity scores (n, m)."""
    entity_vecs = np.asarray(entity_vecs, dtype=np.float64).reshape(-1, model.dim)
    g_e = model.head("head_entity", entity_vecs)
    s_qe = g_e @ model.head("head_query", _vec(f_q))
    s_pe = model.head("head_passage", np.atleast_2d(passage_vecs)) @ g_e.T
    return s_qe, s_pe


def rerank(
    candidates: Sequence[tuple[str, float]],
    model: EncoderModel,
    f_q,
    passage_vecs: Mapping[str, np.ndarray] | DenseIndex,
    entities: Sequence[tuple[str, np.ndarray]],
    lam: float,
) -> list[tuple[str, ScoreBreakdown]]:
    """Rescore MIPS candidates with the combined score.

    ``entities`` holds ``(text, feature_vector)`` pairs; ``s_qp`` is reused
    from the candidate list.
    """
    if not candidates:
        raise ValueError("nothing to rerank")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ids = [c[0] for c in candidates]
    s_qp = np.array([c[1] for c in candidates], dtype=np.float64)
    if isinstance(passage_vecs, DenseIndex):
        P = passage_vecs.vectors(ids)
    else:
        P = np.stack([passage_vecs[i] for i in ids])

    m = len(entities)
    if m:
        s_qe, s_pe = entity_scores(model, f_q, P, np.stack([v for _, v in entities]))
        w = entity_weights(s_qe)
        s_qpe = s_pe @ w
        sig = expit(s_qe)
    else:
        s_qpe = np.zeros(len(ids))

    combined = s_qp + lam * s_qpe
    order = sorted(range(len(ids)), key=lambda i: (-combined[i], ids[i]))
    out = []
    for i in order:
        per = [(entities[j][0], float(s_qe[j]), float(sig[j]), float(s_pe[i, j])) for j in range(m)] if m else []
        out.append((ids[i], ScoreBreakdown(float(s_qp[i]), float(s_qpe[i]), float(combined[i]), lam, per)))
    return out


# --------------------------------------------------------------------------
# run files


def write_run(
    results: Mapping[str, Sequence[tuple[str, float]]], path: str | Path, tag: str = "entityfocus"
) -> None:
    """TREC format: ``query_id Q0 passage_id rank score tag``."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, hits in results.items():
            for rank, (pid, score) in enumerate(hits, start=1):
                fh.write(f"{qid} Q0 {pid} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> dict[str, list[str]]:
    """Ranked passage ids per query, ordered by the rank column."""
    rows: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}: malformed run line {lineno}")
            qid, _, pid, rank = parts[:4]
            rows.setdefault(qid, []).append((int(rank), pid))
    return {qid: [pid for _, pid in sorted(r)] for qid, r in rows.items()}


def write_breakdowns(
    results: Mapping[str, Sequence[tuple[str, ScoreBreakdown]]], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, hits in results.items():
            for rank, (pid, bd) in enumerate(hits, start=1):
                rec = {"query_id": qid, "passage_id": pid, "rank": rank, **bd.record()}
                fh.write(json.dumps(rec) + "\n")
