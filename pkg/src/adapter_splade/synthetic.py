"""Seeded synthetic retrieval tasks with planted relevance, plus a BM25 baseline.

Vocabulary words are split into a *common* pool (Zipf-distributed filler that
appears in most documents) and a *signature* pool.  Every query owns a small
signature set drawn from the signature pool; a document is relevant to a
query exactly when it contains the query's whole signature set.  Documents
also carry a few random signature-pool words, so non-relevant documents
overlap partially with queries and BM25 negatives are genuinely hard.

``shift`` swaps that fraction of the common pool with signature words (and
re-seeds the documents), which turns filler into topical terms and vice
versa: a model trained at shift 0 transfers poorly to a shifted domain.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse as sp

from .data import SPECIAL_TOKENS, Tokenizer, TrainingExample, write_id_text, write_qrels, write_triplets


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 2000
    num_docs: int = 5000
    num_train: int = 500
    num_dev: int = 100
    num_test: int = 100
    signature_size: int = 3
    max_relevant: int = 2
    doc_topic_terms: int = 4
    doc_noise_terms: int = 16
    query_noise_terms: int = 2
    common_fraction: float = 0.25
    zipf_exponent: float = 1.0
    negatives_per_query: int = 4
    negative_depth: int = 30
    teacher_scale: float = 3.0
    shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "num_docs", "num_train", "signature_size", "max_relevant",
                     "negatives_per_query", "negative_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"SyntheticSpec.{name} must be positive")
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError("shift must be in [0, 1]")
        if self.vocab_size <= len(SPECIAL_TOKENS) + 10:
            raise ValueError("vocab_size too small")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    words: list[str]
    collection: dict[str, str]
    queries: dict[str, dict[str, str]]  # split -> qid -> text
    qrels: dict[str, dict[str, dict[str, int]]]  # split -> qrels
    triplets: list[TrainingExample]
    teacher_triplets: list[TrainingExample]
    signatures: dict[str, frozenset[str]] = field(repr=False)

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.words)

    def all_queries(self) -> dict[str, str]:
        out = {}
        for split in ("train", "dev", "test"):
            out.update(self.queries[split])
        return out

    def oracle_score(self, qid: str, doc_id: str) -> float:
        """Planted-relevance teacher: scaled signature overlap."""
        terms = set(self.collection[doc_id].split())
        return self.spec.teacher_scale * len(self.signatures[qid] & terms)


def word_list(vocab_size: int) -> list[str]:
    n = vocab_size - len(SPECIAL_TOKENS)
    width = len(str(n - 1))
    return [f"w{i:0{width}d}" for i in range(n)]


def _roles(spec: SyntheticSpec, words: list[str]):
    rng = np.random.default_rng([spec.seed, 7])
    perm = rng.permutation(len(words))
    n_common = int(round(spec.common_fraction * len(words)))
    common, signature = perm[:n_common].copy(), perm[n_common:].copy()
    n_swap = int(round(spec.shift * n_common))
    if n_swap:
        swap_rng = np.random.default_rng([spec.seed, 11])
        ci = swap_rng.choice(n_common, n_swap, replace=False)
        si = swap_rng.choice(len(signature), n_swap, replace=False)
        common[ci], signature[si] = signature[si].copy(), common[ci].copy()
    return common, signature


def generate_synthetic_corpus(spec: SyntheticSpec) -> SyntheticData:
    words = word_list(spec.vocab_size)
    common, pool = _roles(spec, words)
    rng = np.random.default_rng([spec.seed, int(round(spec.shift * 1_000_000))])
    zipf = 1.0 / np.arange(1, len(common) + 1) ** spec.zipf_exponent
    zipf /= zipf.sum()

    def noise(k):
        return list(common[rng.choice(len(common), k, p=zipf)])

    n_queries = spec.num_train + spec.num_dev + spec.num_test
    qwidth, dwidth = len(str(n_queries - 1)), len(str(spec.num_docs - 1))
    qids = [f"Q{i:0{qwidth}d}" for i in range(n_queries)]

    if math.comb(len(pool), spec.signature_size) < n_queries:
        raise ValueError(f"{len(pool)} signature words cannot give {n_queries} distinct "
                         f"signatures of size {spec.signature_size}")
    sigs: list[tuple[int, ...]] = []
    seen = set()
    while len(sigs) < n_queries:
        s = tuple(sorted(rng.choice(pool, spec.signature_size, replace=False)))
        if s not in seen:
            seen.add(s)
            sigs.append(s)

    docs: list[list[int]] = []
    for s in sigs:
        for _ in range(rng.integers(1, spec.max_relevant + 1)):
            docs.append(list(s) + list(rng.choice(pool, spec.doc_topic_terms)) + noise(spec.doc_noise_terms))
    if len(docs) > spec.num_docs:
        raise ValueError(f"num_docs {spec.num_docs} cannot hold {len(docs)} relevant documents")
    while len(docs) < spec.num_docs:
        docs.append(list(rng.choice(pool, spec.doc_topic_terms + spec.signature_size))
                    + noise(spec.doc_noise_terms))
    order = rng.permutation(len(docs))
    docs = [docs[i] for i in order]
    for d in docs:
        rng.shuffle(d)
    doc_ids = [f"D{i:0{dwidth}d}" for i in range(len(docs))]
    collection = {did: " ".join(words[t] for t in d) for did, d in zip(doc_ids, docs)}

    # relevance follows the planted rule, computed from content
    by_word: dict[int, list[int]] = {}
    for qi, s in enumerate(sigs):
        for w in s:
            by_word.setdefault(w, []).append(qi)
    qrels_all: dict[str, dict[str, int]] = {q: {} for q in qids}
    for did, d in zip(doc_ids, docs):
        hits: dict[int, int] = {}
        for w in set(d):
            for qi in by_word.get(w, ()):
                hits[qi] = hits.get(qi, 0) + 1
        for qi, c in hits.items():
            if c == spec.signature_size:
                qrels_all[qids[qi]][did] = 1

    queries_all = {}
    for qid, s in zip(qids, sigs):
        toks = list(s) + noise(spec.query_noise_terms)
        rng.shuffle(toks)
        queries_all[qid] = " ".join(words[t] for t in toks)

    splits = {
        "train": qids[: spec.num_train],
        "dev": qids[spec.num_train : spec.num_train + spec.num_dev],
        "test": qids[spec.num_train + spec.num_dev :],
    }
    queries = {k: {q: queries_all[q] for q in v} for k, v in splits.items()}
    qrels = {k: {q: qrels_all[q] for q in v} for k, v in splits.items()}
    signatures = {q: frozenset(words[t] for t in s) for q, s in zip(qids, sigs)}

    data = SyntheticData(spec, words, collection, queries, qrels, [], [], signatures)

    bm25 = BM25(collection)
    ranked = bm25.search(queries["train"], spec.negative_depth + spec.max_relevant)
    triplets, teacher = [], []
    for qid in splits["train"]:
        positives = sorted(qrels["train"][qid])
        negatives = [d for d, _ in ranked[qid] if d not in qrels["train"][qid]][: spec.negative_depth]
        if not positives or not negatives:
            continue
        for _ in range(spec.negatives_per_query):
            pos = positives[rng.integers(len(positives))]
            neg = negatives[rng.integers(len(negatives))]
            triplets.append(TrainingExample(qid, pos, neg))
            teacher.append(TrainingExample(qid, pos, neg, data.oracle_score(qid, pos),
                                           data.oracle_score(qid, neg)))
    data.triplets = triplets
    data.teacher_triplets = teacher
    return data


def write_synthetic(data: SyntheticData, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_id_text(out / "collection.tsv", data.collection)
    for split in ("train", "dev", "test"):
        write_id_text(out / f"queries.{split}.tsv", data.queries[split])
        write_qrels(out / f"qrels.{split}.tsv", data.qrels[split])
    write_triplets(out / "triplets.tsv", data.triplets)
    write_triplets(out / "triplets.distill.tsv", data.teacher_triplets)
    Tokenizer(data.words).save(out / "vocab.txt")
    lines = [f"{k} = {v}" for k, v in asdict(data.spec).items()]
    (out / "generator.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


class BM25:
    """Okapi BM25 over whitespace tokens (k1=0.9, b=0.4)."""

    def __init__(self, collection: dict[str, str], k1: float = 0.9, b: float = 0.4):
        self.doc_ids = list(collection)
        vocab: dict[str, int] = {}
        rows, cols = [], []
        for i, text in enumerate(collection.values()):
            for w in text.lower().split():
                rows.append(i)
                cols.append(vocab.setdefault(w, len(vocab)))
        self.vocab = vocab
        tf = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(self.doc_ids), len(vocab)))
        tf.sum_duplicates()
        n = tf.shape[0]
        df = np.bincount(tf.indices, minlength=len(vocab))
        self.idf = np.log(1.0 + (n - df + 0.5) / (df + 0.5))
        dl = np.asarray(tf.sum(axis=1)).ravel()
        norm = k1 * (1.0 - b + b * dl / max(dl.mean(), 1e-9))
        tf = tf.tocoo()
        w = tf.data * (k1 + 1.0) / (tf.data + norm[tf.row])
        self.matrix = sp.csc_matrix((w, (tf.row, tf.col)), shape=tf.shape)

    def scores(self, text: str) -> np.ndarray:
        out = np.zeros(len(self.doc_ids))
        for w in text.lower().split():
            j = self.vocab.get(w)
            if j is not None:
                col = self.matrix.getcol(j)
                out[col.indices] += self.idf[j] * col.data
        return out

    def search(self, queries: dict[str, str], k: int) -> dict[str, list[tuple[str, float]]]:
        run = {}
        for qid, text in queries.items():
            s = self.scores(text)
            cand = np.flatnonzero(s > 0)
            order = cand[np.lexsort((cand, -s[cand]))][:k]
            run[qid] = [(self.doc_ids[i], float(s[i])) for i in order]
        return run
