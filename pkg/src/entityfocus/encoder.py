"""Feature-hashed linear towers standing in for pretrained text encoders.

Each text is turned into a bag of hashed unigrams and bigrams (32-bit
FNV-1a over the UTF-8 bytes, modulo ``hash_dim``).  A tower maps that bag
linearly to ``dim`` dimensions and applies mean-variance normalization.
Three towers (query, passage, entity) produce the main features; three
further heads of the same shape project them for the entity scores.

Precomputed vectors from any other encoder can be swapped in through the
embedding file format (:func:`write_embeddings` / :func:`read_embeddings`).
"""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import Entity, Passage, QueryExample, tokenize

SEP = "[SEP]"  # never produced by tokenize(), so it cannot collide with text tokens
FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193

TOWERS = ("query", "passage", "entity")
HEADS = ("head_query", "head_passage", "head_entity")

EMBED_MAGIC = b"EFEM"
EMBED_VERSION = 1


@lru_cache(maxsize=1 << 18)
def fnv1a_32(token: str) -> int:
    h = FNV_OFFSET
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFF
    return h


def featurize_tokens(tokens: Sequence[str], hash_dim: int) -> dict[int, int]:
    if hash_dim < 2:
        raise ValueError("hash_dim must be >= 2")
    grams = list(tokens) + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    bag: dict[int, int] = {}
    for g in grams:
        j = fnv1a_32(g) % hash_dim
        bag[j] = bag.get(j, 0) + 1
    return dict(sorted(bag.items()))


def featurize(text: str, hash_dim: int) -> dict[int, int]:
    """Hashed unigram+bigram counts of ``text``."""
    return featurize_tokens(tokenize(text), hash_dim)


def query_tokens(q: QueryExample) -> list[str]:
    visual = [e.text for e in q.entities if e.source in ("tag", "wikidata")]
    return tokenize(" ".join([q.question, q.caption, *visual]))


def passage_tokens(p: Passage | str) -> list[str]:
    return tokenize(p.text if isinstance(p, Passage) else p)


def entity_tokens(e: Entity | str, q: QueryExample) -> list[str]:
    text = e.text if isinstance(e, Entity) else e
    return tokenize(text) + [SEP] + tokenize(q.question) + [SEP] + tokenize(q.caption)


def feature_matrix(token_lists: Iterable[Sequence[str]], hash_dim: int) -> sp.csr_matrix:
    indptr, indices, data = [0], [], []
    for toks in token_lists:
        bag = featurize_tokens(toks, hash_dim)
        indices.extend(bag.keys())
        data.extend(bag.values())
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(len(indptr) - 1, hash_dim),
    )


def compact_columns(X: sp.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the nonzero columns of ``X`` and the dense submatrix on them."""
    X = sp.csr_matrix(X)
    cols = np.unique(X.indices)
    return cols, X[:, cols].toarray()


def layer_norm(z: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise (z - mean) / sqrt(var + eps); returns output and 1/std."""
    mu = z.mean(axis=-1, keepdims=True)
    c = z - mu
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    return c * inv, inv


def layer_norm_backward(dy: np.ndarray, y: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


class EncoderModel:
    """Three hashed-feature towers plus three projection heads.

    ``params`` maps names such as ``"query.W"`` or ``"head_entity.b"`` to
    float64 arrays; the trainer updates them in place.
    """

    def __init__(self, hash_dim: int, dim: int, params: dict[str, np.ndarray], eps: float = 1e-5):
        self.hash_dim = int(hash_dim)
        self.dim = int(dim)
        self.eps = float(eps)
        self.params = params
        self._check()

    @classmethod
    def initialize(
        cls,
        hash_dim: int = 4096,
        dim: int = 64,
        seed: int = 0,
        scale: float = 0.1,
        head_noise: float = 0.0,
        eps: float = 1e-5,
    ) -> EncoderModel:
        """Random towers, identity heads (plus optional noise), zero biases."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for t in TOWERS:
            params[f"{t}.W"] = rng.normal(0.0, scale, size=(dim, hash_dim))
            params[f"{t}.b"] = np.zeros(dim)
        for h in HEADS:
            params[f"{h}.W"] = np.eye(dim)
            if head_noise > 0:
                params[f"{h}.W"] += rng.normal(0.0, head_noise, size=(dim, dim))
            params[f"{h}.b"] = np.zeros(dim)
        return cls(hash_dim, dim, params, eps)

    @classmethod
    def zeros(cls, hash_dim: int, dim: int, eps: float = 1e-5) -> EncoderModel:
        params = {}
        for name in TOWERS + HEADS:
            width = hash_dim if name in TOWERS else dim
            params[f"{name}.W"] = np.zeros((dim, width))
            params[f"{name}.b"] = np.zeros(dim)
        return cls(hash_dim, dim, params, eps)

    def _check(self) -> None:
        for name in TOWERS + HEADS:
            width = self.hash_dim if name in TOWERS else self.dim
            W, b = self.params[f"{name}.W"], self.params[f"{name}.b"]
            if W.shape != (self.dim, width) or b.shape != (self.dim,):
                raise ValueError(
                    f"{name} parameters have shape {W.shape}/{b.shape}, expected ({self.dim}, {width})"
                )
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError(f"{name} parameters are not finite")

    def copy(self) -> EncoderModel:
        return EncoderModel(self.hash_dim, self.dim, {k: v.copy() for k, v in self.params.items()}, self.eps)

    # forward pieces ------------------------------------------------------

    def tower(self, name: str, X: sp.spmatrix) -> np.ndarray:
        if X.shape[1] != self.hash_dim:
            raise ValueError(f"feature width {X.shape[1]} does not match hash_dim {self.hash_dim}")
        cols, Xc = compact_columns(X)
        z = Xc @ self.params[f"{name}.W"][:, cols].T + self.params[f"{name}.b"]
        return layer_norm(z, self.eps)[0]

    def head(self, name: str, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=np.float64)
        if F.shape[-1] != self.dim:
            raise ValueError(f"vector dimension {F.shape[-1]} does not match model dim {self.dim}")
        z = F @ self.params[f"{name}.W"].T + self.params[f"{name}.b"]
        return layer_norm(z, self.eps)[0]

    # encoders ------------------------------------------------------------

    def encode_queries(self, queries: Sequence[QueryExample]) -> np.ndarray:
        return self.tower("query", feature_matrix((query_tokens(q) for q in queries), self.hash_dim))

    def encode_passages(self, passages: Sequence[Passage | str]) -> np.ndarray:
        return self.tower("passage", feature_matrix((passage_tokens(p) for p in passages), self.hash_dim))

    def encode_entities(self, entities: Sequence[Entity], q: QueryExample) -> np.ndarray:
        X = feature_matrix((entity_tokens(e, q) for e in entities), self.hash_dim)
        return self.tower("entity", X)

    def encode_query(self, q: QueryExample) -> np.ndarray:
        return self.encode_queries([q])[0]

    def encode_passage(self, p: Passage | str) -> np.ndarray:
        return self.encode_passages([p])[0]

    def encode_entity(self, e: Entity, q: QueryExample) -> np.ndarray:
        return self.encode_entities([e], q)[0]


def encode_query(model: EncoderModel, q: QueryExample) -> np.ndarray:
    return model.encode_query(q)


def encode_passage(model: EncoderModel, p: Passage) -> np.ndarray:
    return model.encode_passage(p)


def encode_entity(model: EncoderModel, e: Entity, q: QueryExample) -> np.ndarray:
    return model.encode_entity(e, q)


def entity_key(query_id: str, e: Entity) -> str:
    """Row id used for entity vectors in embedding files."""
    return f"{query_id}\t{e.source}\t{e.text}"


# --------------------------------------------------------------------------
# embedding files


def write_embeddings(vectors: Mapping[str, np.ndarray], path: str | Path, dim: int | None = None) -> None:
    """Write ``id -> vector`` as little-endian float32 rows under an EFEM header."""
    items = list(vectors.items())
    if dim is None:
        dim = len(items[0][1]) if items else 0
    parts = [EMBED_MAGIC, struct.pack("<IIQ", EMBED_VERSION, dim, len(items))]
    for key, vec in items:
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.shape[0] != dim:
            raise ValueError(f"vector for id {key!r} has length {vec.size}, expected {dim}")
        if not np.isfinite(vec).all():
            raise ValueError(f"vector for id {key!r} is not finite")
        raw = key.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + vec.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    if len(data) < 20:
        raise ValueError(f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != EMBED_VERSION:
        raise ValueError(f"{path}: unsupported embedding file version {version}")
    off = 20
    out: dict[str, np.ndarray] = {}
    for row in range(count):
        if off + 4 > len(data):
            raise ValueError(f"{path}: truncated before row {row}")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + n > len(data):
            raise ValueError(f"{path}: truncated id in row {row}")
        key = data[off : off + n].decode("utf-8")
        off += n
        if off + 4 * dim > len(data):
            raise ValueError(f"{path}: row for id {key!r} is truncated (expected {dim} floats)")
        if key in out:
            raise ValueError(f"{path}: duplicate id {key!r}")
        out[key] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after {count} rows")
    return out
