"""BM25 inverted index with entity-emphasized queries.

Scoring uses the Lucene flavour of BM25, whose IDF
``ln(1 + (N - df + 0.5) / (df + 0.5))`` is never negative.  Hits are
ordered by score, then by passage id, so results do not depend on the
order passages were indexed in.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Entity, Passage, tokenize

MAGIC = b"EFSI"
FORMAT_VERSION = 1

# small English list; only used when an index is built with stopwords=True
STOPWORDS = frozenset(
    """a about an and are as at be by do does for from how in is it its of on or
    that the this to was what when where which who why will with you""".split()
)


@dataclass(frozen=True)
class SparseHit:
    passage_id: str
    score: float
    rank: int


class InvertedIndex:
    """Term -> postings over a fixed passage set.

    Documents are held in ascending-id order; postings store positions
    into that order.  ``postings[term]`` is a pair of int arrays
    ``(doc_positions, term_frequencies)``.
    """

    def __init__(
        self,
        doc_ids: Sequence[str],
        doc_lengths: np.ndarray,
        postings: dict[str, tuple[np.ndarray, np.ndarray]],
        k1: float = 1.1,
        b: float = 0.4,
        stopwords: bool = False,
    ):
        if not doc_ids:
            raise ValueError("cannot index an empty corpus")
        if k1 <= 0:
            raise ValueError("k1 must be positive")
        if not 0.0 <= b <= 1.0:
            raise ValueError("b must lie in [0, 1]")
        self.doc_ids = list(doc_ids)
        self.doc_lengths = np.asarray(doc_lengths, dtype=np.int64)
        self.postings = postings
        self.k1 = float(k1)
        self.b = float(b)
        self.stopwords = bool(stopwords)
        self.avg_doc_length = float(self.doc_lengths.mean())
        self._pos = {pid: i for i, pid in enumerate(self.doc_ids)}
        # per-document length normalisation, cached once
        self._norm = self.k1 * (1.0 - self.b + self.b * self.doc_lengths / self.avg_doc_length)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def doc_length(self, passage_id: str) -> int:
        return int(self.doc_lengths[self._pos[passage_id]])

    def analyze(self, text: str) -> list[str]:
        toks = tokenize(text)
        if self.stopwords:
            toks = [t for t in toks if t not in STOPWORDS]
        return toks

    def idf(self, term: str) -> float:
        post = self.postings.get(term)
        df = 0 if post is None else len(post[0])
        n = self.doc_count
        return float(np.log1p((n - df + 0.5) / (df + 0.5)))

    def scores(self, query_terms: Mapping[str, int] | Iterable[str]) -> np.ndarray:
        """Dense BM25 score vector over all documents (ascending-id order)."""
        bag = query_terms if isinstance(query_terms, Mapping) else Counter(query_terms)
        out = np.zeros(self.doc_count)
        for term, qtf in bag.items():
            if qtf <= 0 or (self.stopwords and term in STOPWORDS):
                continue
            post = self.postings.get(term)
            if post is None:
                continue
            docs, tf = post
            idf = self.idf(term)
            out[docs] += qtf * idf * tf * (self.k1 + 1.0) / (tf + self._norm[docs])
        return out

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
        parts.append(struct.pack("<ddB", self.k1, self.b, int(self.stopwords)))
        parts.append(struct.pack("<Q", self.doc_count))
        for pid, length in zip(self.doc_ids, self.doc_lengths):
            raw = pid.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", int(length)))
        parts.append(struct.pack("<Q", len(self.postings)))
        for term in sorted(self.postings):
            docs, tf = self.postings[term]
            raw = term.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(docs)))
            pairs = np.empty((len(docs), 2), dtype="<u4")
            pairs[:, 0] = docs
            pairs[:, 1] = tf
            parts.append(pairs.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> InvertedIndex:
        if data[:4] != MAGIC:
            raise ValueError("not a sparse index file (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported sparse index version {version}")
        off = 8
        k1, b, stop = struct.unpack_from("<ddB", data, off)
        off += 17
        (n_docs,) = struct.unpack_from("<Q", data, off)
        off += 8
        doc_ids, lengths = [], []
        for _ in range(n_docs):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            doc_ids.append(data[off : off + n].decode("utf-8"))
            off += n
            (length,) = struct.unpack_from("<I", data, off)
            lengths.append(length)
            off += 4
        (n_terms,) = struct.unpack_from("<Q", data, off)
        off += 8
        postings = {}
        for _ in range(n_terms):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            term = data[off : off + n].decode("utf-8")
            off += n
            (count,) = struct.unpack_from("<I", data, off)
            off += 4
            pairs = np.frombuffer(data, dtype="<u4", count=2 * count, offset=off).reshape(count, 2)
            off += 8 * count
            postings[term] = (pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.float64))
        if off != len(data):
            raise ValueError("trailing bytes in sparse index file")
        return cls(doc_ids, np.array(lengths), postings, k1=k1, b=b, stopwords=bool(stop))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> InvertedIndex:
        return cls.from_bytes(Path(path).read_bytes())


def build_index(
    passages: Sequence[Passage], k1: float = 1.1, b: float = 0.4, stopwords: bool = False
) -> InvertedIndex:
    if not passages:
        raise ValueError("cannot index an empty corpus")
    ordered = sorted(passages, key=lambda p: p.id)
    raw: dict[str, tuple[list[int], list[int]]] = {}
    lengths = np.zeros(len(ordered), dtype=np.int64)
    for pos, p in enumerate(ordered):
        toks = tokenize(p.text)
        if stopwords:
            toks = [t for t in toks if t not in STOPWORDS]
        lengths[pos] = len(toks)
        for term, tf in Counter(toks).items():
            docs, tfs = raw.setdefault(term, ([], []))
            docs.append(pos)
            tfs.append(tf)
    postings = {
        t: (np.array(d, dtype=np.int64), np.array(f, dtype=np.float64)) for t, (d, f) in raw.items()
    }
    ids = [p.id for p in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate passage ids")
    return InvertedIndex(ids, lengths, postings, k1=k1, b=b, stopwords=stopwords)


def bm25_search(
    index: InvertedIndex, query_terms: Mapping[str, int] | Iterable[str], k: int
) -> list[SparseHit]:
    """Top-``k`` passages with a positive BM25 score."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.scores(query_terms)
    hit = np.flatnonzero(scores > 0)
    if hit.size == 0:
        return []
    # documents are stored in id order, so position breaks ties by id
    order = hit[np.lexsort((hit, -scores[hit]))][:k]
    return [
        SparseHit(index.doc_ids[i], float(scores[i]), rank)
        for rank, i in enumerate(order, start=1)
    ]


def augment_query(question: str, entity: Entity | str | None = None) -> Counter:
    """Bag of question terms plus the entity's terms appended."""
    bag = Counter(tokenize(question))
    if entity is not None:
        text = entity.text if isinstance(entity, Entity) else entity
        bag.update(tokenize(text))
    return bag
