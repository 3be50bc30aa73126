"""Passages, queries, entities, and the answer-containment test.

Everything downstream (BM25 mining, evaluation, training data) decides
whether a passage is "gold" through :func:`contains_answer`, so the
normalization rules live here and nowhere else.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
ARTICLES = frozenset({"a", "an", "the"})

SOURCES = ("question", "sub_question", "candidate", "tag", "wikidata", "caption")
IMAGE_SOURCES = frozenset({"tag", "wikidata", "caption"})
QUESTION_SOURCES = frozenset({"question", "sub_question", "candidate"})


class CorpusFormatError(ValueError):
    """Raised for malformed or inconsistent corpus/query files."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation boundaries."""
    return TOKEN_RE.findall(text.lower())


def stem_token(token: str) -> str:
    # plural stripping only; "ss", "us", "is" endings are left alone
    if len(token) < 4 or token.endswith(("ss", "us", "is")):
        return token
    if token.endswith(("xes", "zes", "ches", "shes", "oes")):
        return token[:-2]
    if token.endswith("s"):
        return token[:-1]
    return token


@lru_cache(maxsize=1 << 16)
def normalized_tokens(text: str, stem: bool = False) -> tuple[str, ...]:
    toks = [t for t in tokenize(text) if t not in ARTICLES]
    if stem:
        toks = [stem_token(t) for t in toks]
    return tuple(toks)


def normalize_text(raw: str, stem: bool = False) -> str:
    """Canonical answer form: lowercase, no punctuation, no articles.

    >>> normalize_text("The  Teddy-Bear!")
    'teddy bear'
    """
    return " ".join(normalized_tokens(raw, stem))


def contains_tokens(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    """True if ``needle`` occurs as a contiguous run inside ``haystack``."""
    if not needle:
        return False
    # tokens never contain spaces, so padded string search is exact
    return f" {' '.join(needle)} " in f" {' '.join(haystack)} "


@dataclass(frozen=True)
class Entity:
    text: str
    source: str
    oracle_label: bool | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("entity text must be nonempty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown entity source {self.source!r}")

    def with_label(self, label: bool) -> Entity:
        return Entity(self.text, self.source, bool(label))


@dataclass(frozen=True)
class Passage:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("passage id must be nonempty")
        if not self.text:
            raise ValueError(f"passage {self.id!r} has empty text")

    @property
    def token_count(self) -> int:
        return len(tokenize(self.text))


@dataclass(frozen=True)
class QueryExample:
    id: str
    question: str
    answers: tuple[str, ...]
    caption: str = ""
    entities: tuple[Entity, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.id:
            raise ValueError("query id must be nonempty")
        if not self.question:
            raise ValueError(f"query {self.id!r} has empty question")
        if not self.answers:
            raise ValueError(f"query {self.id!r} has no answers")
        object.__setattr__(self, "answers", tuple(self.answers))
        object.__setattr__(self, "entities", tuple(self.entities))
        seen = set()
        for e in self.entities:
            key = (e.text, e.source)
            if key in seen:
                raise ValueError(f"query {self.id!r} repeats entity {key}")
            seen.add(key)

    def replace_entities(self, entities: Iterable[Entity]) -> QueryExample:
        return QueryExample(self.id, self.question, self.answers, self.caption, tuple(entities))


def _answer_token_seqs(answers: Iterable[str], stem: bool) -> list[tuple[str, ...]]:
    seqs = [normalized_tokens(a, stem) for a in answers]
    seqs = [s for s in seqs if s]
    if not seqs:
        raise ValueError("every answer normalizes to the empty string")
    return seqs


def contains_answer(passage: Passage | str, answers: Iterable[str], stem: bool = False) -> bool:
    """Gold-passage test: some normalized answer is a token run of the passage."""
    text = passage.text if isinstance(passage, Passage) else passage
    hay = normalized_tokens(text, stem)
    return any(contains_tokens(hay, seq) for seq in _answer_token_seqs(answers, stem))


def contains_phrase(passage: Passage | str, phrase: str, stem: bool = False) -> bool:
    """Same token-run test for a single phrase; empty phrases never match."""
    text = passage.text if isinstance(passage, Passage) else passage
    return contains_tokens(normalized_tokens(text, stem), normalized_tokens(phrase, stem))


# --------------------------------------------------------------------------
# JSON-lines IO


def _iter_records(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"malformed JSON at line {lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise CorpusFormatError(f"malformed record at line {lineno}: expected an object")
            yield lineno, rec


def load_corpus(path: str | Path) -> list[Passage]:
    passages: list[Passage] = []
    seen: set[str] = set()
    for lineno, rec in _iter_records(path):
        try:
            p = Passage(str(rec["id"]), rec["text"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"malformed passage at line {lineno}: {exc}") from None
        if p.id in seen:
            raise CorpusFormatError(f"duplicate id {p.id!r} at line {lineno}")
        seen.add(p.id)
        passages.append(p)
    return passages


def _query_from_record(rec: dict) -> QueryExample:
    ents = tuple(Entity(e["text"], e["source"]) for e in rec.get("entities", []))
    return QueryExample(
        id=str(rec["id"]),
        question=rec["question"],
        answers=tuple(rec["answers"]),
        caption=rec.get("caption", ""),
        entities=ents,
    )


def load_queries(path: str | Path) -> list[QueryExample]:
    queries: list[QueryExample] = []
    seen: set[str] = set()
    for lineno, rec in _iter_records(path):
        try:
            q = _query_from_record(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"malformed query at line {lineno}: {exc}") from None
        if q.id in seen:
            raise CorpusFormatError(f"duplicate id {q.id!r} at line {lineno}")
        seen.add(q.id)
        queries.append(q)
    return queries


def passage_record(p: Passage) -> dict:
    return {"id": p.id, "text": p.text}


def query_record(q: QueryExample) -> dict:
    return {
        "id": q.id,
        "question": q.question,
        "caption": q.caption,
        "answers": list(q.answers),
        "entities": [{"text": e.text, "source": e.source} for e in q.entities],
    }


def write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_corpus(passages: Iterable[Passage], path: str | Path) -> None:
    write_jsonl((passage_record(p) for p in passages), path)


def write_queries(queries: Iterable[QueryExample], path: str | Path) -> None:
    write_jsonl((query_record(q) for q in queries), path)


def corpus_lookup(passages: Iterable[Passage]) -> dict[str, Passage]:
    return {p.id: p for p in passages}
