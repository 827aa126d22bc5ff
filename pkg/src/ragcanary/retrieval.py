"""Dense vector index with exhaustive top-K cosine retrieval.

Exact scan, no ANN: corpora at the scale this package targets fit in memory,
and exactness keeps retrieval-accuracy numbers meaningful. Vectors must arrive
unit-normalized, so cosine similarity is a plain dot product.

Ordering contract: similarity scores are rounded to 12 decimal places before
ranking, and equal rounded scores order by ascending doc_id. The rounding
collapses ULP-level accumulation noise (which differs between BLAS kernels)
into the deterministic tie-break, making result order total and stable across
runs and platforms.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

_NORM_TOL = 1e-6
SCORE_DECIMALS = 12


class Embedder(Protocol):
    dimension: int

    def __call__(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic test embedder: signed feature hashing of word unigrams.

    Words are lowercased, hashed with a keyed blake2b into one of d buckets
    with a +/-1 sign, and the bucket counts are L2-normalized. Identical text
    gives identical vectors on any platform; unrelated texts are nearly
    orthogonal in expectation.
    """

    def __init__(self, dimension: int, seed: int):
        if dimension < 8:
            raise ValidationError(f"embedding dimension must be >= 8, got {dimension}")
        self.dimension = dimension
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=False)
        self._cache: dict[str, tuple[int, int]] = {}

    def slot(self, word: str) -> tuple[int, int]:
        """(bucket, sign) a lowercased word hashes to."""
        hit = self._cache.get(word)
        if hit is None:
            h = hashlib.blake2b(word.encode("utf-8"), key=self._key, digest_size=8)
            v = int.from_bytes(h.digest(), "little")
            hit = ((v >> 1) % self.dimension, 1 if v & 1 else -1)
            self._cache[word] = hit
        return hit

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for word in text.lower().split():
            bucket, sign = self.slot(word)
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ValidationError("cannot embed text with no words (zero vector)")
        return vec / norm


class TfidfHashingEmbedder:
    """Hashing embedder with idf weights fit on a corpus.

    Rare words dominate the vector (idf = log(N/df), so corpus-wide words
    vanish), which is what makes unique fictional-entity names reliable
    retrieval anchors. Words never seen in the fitting corpus get the maximum
    idf.
    """

    def __init__(self, dimension: int, seed: int, corpus_texts):
        self._base = HashingEmbedder(dimension, seed)
        self.dimension = dimension
        df: dict[str, int] = {}
        n_docs = 0
        for text in corpus_texts:
            n_docs += 1
            for word in set(text.lower().split()):
                df[word] = df.get(word, 0) + 1
        if n_docs == 0:
            raise ValidationError("idf fitting needs a nonempty corpus")
        self._n_docs = n_docs
        self._idf = {word: math.log(n_docs / count) for word, count in df.items()}
        self._max_idf = math.log(n_docs)

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for word in text.lower().split():
            weight = self._idf.get(word, self._max_idf)
            if weight == 0.0:
                continue
            bucket, sign = self._base.slot(word)
            vec[bucket] += sign * weight
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ValidationError("text has no informative words under the fitted idf")
        return vec / norm


@dataclass(frozen=True)
class RetrievalResult:
    """Top-K hits as (doc_id, cosine score), scores nonincreasing, ties by doc_id."""

    hits: tuple[tuple[str, float], ...]

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.hits]


class VectorIndex:
    """Immutable store of (doc_id, unit vector) rows."""

    def __init__(self, doc_ids: list[str], matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(doc_ids):
            raise ValidationError("index matrix must have one row per doc id")
        seen: dict[str, int] = {}
        for i, doc_id in enumerate(doc_ids):
            if doc_id in seen:
                raise ValidationError(f"duplicate doc_id {doc_id!r} in index")
            seen[doc_id] = i
        norms = np.linalg.norm(matrix, axis=1)
        if matrix.shape[0] and np.max(np.abs(norms - 1.0)) > _NORM_TOL:
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ValidationError(
                f"vector for {doc_ids[worst]!r} is not unit norm ({norms[worst]:.8f})"
            )
        self.doc_ids = list(doc_ids)
        self.matrix = matrix
        self.dimension = matrix.shape[1] if matrix.size else 0
        self.failures: list[tuple[str, str]] = []
        self._id_array = np.array(doc_ids)

    def __len__(self) -> int:
        return len(self.doc_ids)

    # -- persistence: "doc_id\tf1 f2 ... fd" per line ------------------------

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"dim {self.dimension}\n")
            for doc_id, row in zip(self.doc_ids, self.matrix):
                floats = " ".join(repr(float(x)) for x in row)
                fh.write(f"{doc_id}\t{floats}\n")

    @staticmethod
    def load(path) -> "VectorIndex":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2 or header[0] != "dim":
                raise ValidationError(f"{path} is not an index file")
            dim = int(header[1])
            ids: list[str] = []
            rows: list[list[float]] = []
            for line in fh:
                if not line.strip():
                    continue
                doc_id, _, floats = line.rstrip("\n").partition("\t")
                row = [float(x) for x in floats.split()]
                if len(row) != dim:
                    raise ValidationError(f"row for {doc_id!r} has {len(row)} floats, expected {dim}")
                ids.append(doc_id)
                rows.append(row)
        return VectorIndex(ids, np.array(rows, dtype=np.float64))


def build_index(corpus: Iterable[tuple[str, str]], embedder: Embedder) -> VectorIndex:
    """Embed every document; per-doc failures are logged and recorded on the index."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    failures: list[tuple[str, str]] = []
    for doc_id, text in corpus:
        try:
            rows.append(np.asarray(embedder(text), dtype=np.float64))
            ids.append(doc_id)
        except Exception as exc:  # noqa: BLE001 - per-doc isolation is the contract
            log.warning("embedding failed for %r: %s", doc_id, exc)
            failures.append((doc_id, str(exc)))
    if not ids:
        raise ValidationError("no documents could be embedded")
    index = VectorIndex(ids, np.vstack(rows))
    index.failures = failures
    return index


def retrieve(index: VectorIndex, query: str, k: int, embedder: Embedder) -> RetrievalResult:
    """Exhaustive top-K by cosine; equal scores order by ascending doc_id."""
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    if len(index) == 0:
        raise ValidationError("cannot retrieve from an empty index")
    q = np.asarray(embedder(query), dtype=np.float64)
    if q.shape != (index.dimension,):
        raise ValidationError("query embedding dimension does not match the index")
    sims = np.round(index.matrix @ q, SCORE_DECIMALS)
    order = np.lexsort((index._id_array, -sims))
    top = order[: min(k, len(index))]
    return RetrievalResult(tuple((index.doc_ids[i], float(sims[i])) for i in top))


def target_retrieval_accuracy(
    pairs: Iterable[tuple[str, str]],
    index: VectorIndex,
    k: int,
    embedder: Embedder,
) -> float:
    """Fraction of (query, expected_doc_id) pairs whose doc appears in the top-K."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("target_retrieval_accuracy needs at least one pair")
    known = set(index.doc_ids)
    hits = 0
    for query, expected in pairs:
        if expected not in known:
            log.warning("expected doc_id %r is not in the index; counted as a miss", expected)
            continue
        if expected in retrieve(index, query, k, embedder).doc_ids():
            hits += 1
    return hits / len(pairs)
