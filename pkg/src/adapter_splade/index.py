"""Inverted index over sparse vectors, exact top-k search and R-FLOPS.

Binary file layout (all integers little-endian)::

    magic        8 bytes   b"ASPLIDX\\0"
    version      u32       currently 1
    doc_count    u64
    vocab_size   u64
    nnz          u64       total stored (term, doc) pairs
    doc ids      doc_count x (u32 byte length, utf-8 bytes)
    offsets      (vocab_size + 1) x u64   postings of term j are [offsets[j], offsets[j+1])
    doc indices  nnz x u32
    weights      nnz x f64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sparse import SparseVector

MAGIC = b"ASPLIDX\0"
VERSION = 1


class IndexFormatError(ValueError):
    """Unreadable, truncated or version-mismatched index file."""


@dataclass
class RankedList:
    query_id: str
    hits: list[tuple[str, float]]

    def __len__(self):
        return len(self.hits)

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.hits]


class InvertedIndex:
    """Postings in CSR form: term j owns ``doc_idx[offsets[j]:offsets[j+1]]``.

    Internal document numbers follow ascending doc id, so postings sorted by
    number are sorted by id and ties in search break by doc id for free.
    """

    def __init__(self, doc_ids: Sequence[str], vocab_size: int, offsets: np.ndarray,
                 doc_idx: np.ndarray, weights: np.ndarray):
        self.doc_ids = list(doc_ids)
        self.vocab_size = int(vocab_size)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.doc_idx = np.asarray(doc_idx, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def nnz(self) -> int:
        return len(self.doc_idx)

    @property
    def df(self) -> np.ndarray:
        return np.diff(self.offsets)

    def doc_activation(self) -> np.ndarray:
        """p_j^(d): fraction of documents with a nonzero weight on term j."""
        if self.doc_count == 0:
            return np.zeros(self.vocab_size)
        return self.df / self.doc_count

    def postings(self, term: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[term], self.offsets[term + 1]
        return self.doc_idx[lo:hi], self.weights[lo:hi]

    def document(self, doc_id: str) -> SparseVector:
        i = self.doc_ids.index(doc_id)
        terms = np.repeat(np.arange(self.vocab_size), self.df)
        sel = self.doc_idx == i
        return SparseVector(terms[sel], self.weights[sel])

    def __eq__(self, other):
        return (
            isinstance(other, InvertedIndex)
            and self.doc_ids == other.doc_ids
            and self.vocab_size == other.vocab_size
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.doc_idx, other.doc_idx)
            and np.array_equal(self.weights, other.weights)
        )


def build_index(corpus: Iterable[tuple[str, SparseVector]], vocab_size: int,
                prune_below: float = 0.0) -> InvertedIndex:
    """Build postings; weights ``< prune_below`` are dropped (0 keeps everything)."""
    items = list(corpus)
    seen = set()
    for doc_id, _ in items:
        if doc_id in seen:
            raise ValueError(f"duplicate document id {doc_id!r}")
        seen.add(doc_id)
    items.sort(key=lambda kv: kv[0])
    terms, docs, weights = [], [], []
    for i, (_, vec) in enumerate(items):
        if len(vec) and vec.ids[-1] >= vocab_size:
            raise ValueError(f"term id {vec.ids[-1]} >= vocab size {vocab_size}")
        keep = vec.weights >= prune_below
        terms.append(vec.ids[keep])
        docs.append(np.full(int(keep.sum()), i, dtype=np.int64))
        weights.append(vec.weights[keep])
    if items:
        terms = np.concatenate(terms)
        docs = np.concatenate(docs)
        weights = np.concatenate(weights)
    else:
        terms = docs = np.zeros(0, dtype=np.int64)
        weights = np.zeros(0)
    order = np.lexsort((docs, terms))
    counts = np.bincount(terms, minlength=vocab_size) if len(terms) else np.zeros(vocab_size, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return InvertedIndex([d for d, _ in items], vocab_size, offsets, docs[order], weights[order])


def _top_k(acc: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best nonzero scores ordered by (score desc, index asc)."""
    cand = np.flatnonzero(acc > 0)
    if len(cand) > k:
        # k-th largest value; keep everything tied with it so ties resolve by index
        kth = np.partition(acc[cand], len(cand) - k)[len(cand) - k]
        cand = cand[acc[cand] >= kth]
    order = np.lexsort((cand, -acc[cand]))
    return cand[order[:k]]


def search(index: InvertedIndex, q: SparseVector, k: int, query_id: str = "") -> RankedList:
    """Exact term-at-a-time scoring with a dense accumulator."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(q) == 0 or index.doc_count == 0:
        return RankedList(query_id, [])
    acc = np.zeros(index.doc_count)
    for term, w in zip(q.ids, q.weights):
        if term >= index.vocab_size:
            continue
        docs, dw = index.postings(term)
        acc[docs] += w * dw
    top = _top_k(acc, k)
    return RankedList(query_id, [(index.doc_ids[i], float(acc[i])) for i in top])


def query_activation(queries: Sequence[SparseVector], vocab_size: int) -> np.ndarray:
    p = np.zeros(vocab_size)
    for q in queries:
        p[q.ids[q.ids < vocab_size]] += 1.0
    return p / max(len(queries), 1)


def estimate_rflops(index: InvertedIndex, queries: Sequence[SparseVector]) -> float:
    """sum_j p_j^(q) p_j^(d), binary activations, queries as the query sample."""
    if len(queries) == 0:
        raise ValueError("estimate_rflops needs at least one query")
    return float(query_activation(queries, index.vocab_size) @ index.doc_activation())


# -- persistence ------------------------------------------------------------


def save_index(index: InvertedIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQQ", VERSION, index.doc_count, index.vocab_size, index.nnz))
        for d in index.doc_ids:
            raw = d.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(index.offsets.astype("<u8").tobytes())
        fh.write(index.doc_idx.astype("<u4").tobytes())
        fh.write(index.weights.astype("<f8").tobytes())


def load_index(path) -> InvertedIndex:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise IndexFormatError(f"{path}: truncated index file")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise IndexFormatError(f"{path}: not an index file (bad magic)")
    version, doc_count, vocab_size, nnz = struct.unpack("<IQQQ", take(28))
    if version != VERSION:
        raise IndexFormatError(f"{path}: index version {version}, expected {VERSION}")
    doc_ids = []
    for _ in range(doc_count):
        (n,) = struct.unpack("<I", take(4))
        doc_ids.append(take(n).decode("utf-8"))
    offsets = np.frombuffer(take(8 * (vocab_size + 1)), dtype="<u8").astype(np.int64)
    doc_idx = np.frombuffer(take(4 * nnz), dtype="<u4").astype(np.int64)
    weights = np.frombuffer(take(8 * nnz), dtype="<f8").astype(np.float64)
    if pos != len(data):
        raise IndexFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return InvertedIndex(doc_ids, vocab_size, offsets, doc_idx, weights)
