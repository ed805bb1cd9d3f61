"""Tokenizer and TSV / TREC file formats.

Formats::

    collection   docid<TAB>text
    queries      qid<TAB>text
    triplets     qid<TAB>posid<TAB>negid[<TAB>teacher_pos<TAB>teacher_neg]
    qrels        qid 0 docid rel            (whitespace separated)
    run          qid Q0 docid rank score tag
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .encoder import TokenSequence

SPECIAL_TOKENS = ("[PAD]", "[START]", "[SEP]", "[UNK]")
PAD, START, SEP, UNK = range(4)


class DataFormatError(ValueError):
    """Malformed input file; the message names the offending line(s)."""


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary; ids 0-3 are reserved."""

    def __init__(self, tokens: Iterable[str], lowercase: bool = True):
        self.lowercase = lowercase
        self.vocab: list[str] = list(SPECIAL_TOKENS)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.vocab)}
        for tok in tokens:
            tok = tok.lower() if lowercase else tok
            if tok not in self.index:
                self.index[tok] = len(self.vocab)
                self.vocab.append(tok)

    @classmethod
    def from_texts(cls, texts: Iterable[str], lowercase: bool = True) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update((t.lower() if lowercase else t).split())
        return cls(sorted(words), lowercase)

    def __len__(self):
        return len(self.vocab)

    def tokenize(self, text: str) -> list[int]:
        if self.lowercase:
            text = text.lower()
        return [self.index.get(w, UNK) for w in text.split()]

    def encode(self, text: str) -> TokenSequence:
        return TokenSequence(self.tokenize(text))

    def encode_pair(self, query: str, doc: str, max_len: int) -> TokenSequence:
        """``[START] q [SEP] d`` with segment 0 up to and including [SEP]; the
        document side is truncated first."""
        q = self.tokenize(query)[: max(max_len - 2, 0)]
        d = self.tokenize(doc)[: max(max_len - 2 - len(q), 0)]
        ids = [START] + q + [SEP] + d
        segs = [0] * (len(q) + 2) + [1] * len(d)
        return TokenSequence(ids, None, segs)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocab[len(SPECIAL_TOKENS):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, lowercase: bool = True) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([l for l in lines if l], lowercase)

    def to_list(self) -> list[str]:
        return self.vocab[len(SPECIAL_TOKENS):]


@dataclass(frozen=True)
class TrainingExample:
    qid: str
    pos_id: str
    neg_id: str
    teacher_pos: float | None = None
    teacher_neg: float | None = None

    @property
    def teacher_margin(self) -> float:
        return self.teacher_pos - self.teacher_neg


def _lines(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.strip():
                yield no, line


def _raise_bad(path, bad: list[tuple[int, str]]):
    if bad:
        detail = "; ".join(f"line {n}: {why}" for n, why in bad[:10])
        raise DataFormatError(f"{path}: {len(bad)} malformed line(s): {detail}")


def _load_id_text(path) -> dict[str, str]:
    out: dict[str, str] = {}
    bad = []
    for no, line in _lines(path):
        key, sep, text = line.partition("\t")
        if not sep or not key:
            bad.append((no, "expected id<TAB>text"))
        elif key in out:
            bad.append((no, f"duplicate id {key!r}"))
        else:
            out[key] = text
    _raise_bad(path, bad)
    return out


def load_collection(path) -> dict[str, str]:
    return _load_id_text(path)


def load_queries(path) -> dict[str, str]:
    return _load_id_text(path)


def load_triplets(path, queries: Mapping | None = None, collection: Mapping | None = None,
                  teacher: bool = False) -> list[TrainingExample]:
    """Read triplets; ids are checked against ``queries``/``collection`` when given."""
    out, bad = [], []
    width = 5 if teacher else 3
    for no, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != width:
            bad.append((no, f"expected {width} tab-separated fields, got {len(parts)}"))
            continue
        qid, pos, neg = parts[:3]
        if queries is not None and qid not in queries:
            bad.append((no, f"unknown query id {qid!r}"))
            continue
        missing = [d for d in (pos, neg) if collection is not None and d not in collection]
        if missing:
            bad.append((no, f"unknown document id {missing[0]!r}"))
            continue
        if teacher:
            try:
                tp, tn = float(parts[3]), float(parts[4])
            except ValueError:
                bad.append((no, "non-numeric teacher score"))
                continue
            out.append(TrainingExample(qid, pos, neg, tp, tn))
        else:
            out.append(TrainingExample(qid, pos, neg))
    _raise_bad(path, bad)
    return out


def load_teacher_triplets(path, queries=None, collection=None) -> list[TrainingExample]:
    return load_triplets(path, queries, collection, teacher=True)


def write_triplets(path, examples: Iterable[TrainingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            row = [e.qid, e.pos_id, e.neg_id]
            if e.teacher_pos is not None:
                row += [repr(float(e.teacher_pos)), repr(float(e.teacher_neg))]
            fh.write("\t".join(row) + "\n")


def write_id_text(path, table: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in table.items():
            fh.write(f"{k}\t{v}\n")


Qrels = dict  # qid -> {docid: relevance}


def load_qrels(path) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    bad = []
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) != 4:
            bad.append((no, "expected 'qid 0 docid rel'"))
            continue
        qid, _, doc, rel = parts
        try:
            r = int(rel)
        except ValueError:
            bad.append((no, f"non-integer relevance {rel!r}"))
            continue
        if r < 0:
            bad.append((no, "negative relevance"))
        elif doc in out.get(qid, {}):
            bad.append((no, f"duplicate judgement ({qid}, {doc})"))
        else:
            out.setdefault(qid, {})[doc] = r
    _raise_bad(path, bad)
    return out


def write_qrels(path, qrels: Mapping[str, Mapping[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, docs in qrels.items():
            for doc, rel in docs.items():
                fh.write(f"{qid} 0 {doc} {int(rel)}\n")


Run = dict  # qid -> [(docid, score), ...] in rank order


def write_run(path, run: Mapping[str, list[tuple[str, float]]], tag: str = "adapter-splade") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, hits in run.items():
            for rank, (doc, s) in enumerate(hits, 1):
                fh.write(f"{qid} Q0 {doc} {rank} {float(s)!r} {tag}\n")


def load_run(path) -> dict[str, list[tuple[str, float]]]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    bad = []
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) != 6:
            bad.append((no, "expected 'qid Q0 docid rank score tag'"))
            continue
        try:
            rows.setdefault(parts[0], []).append((int(parts[3]), parts[2], float(parts[4])))
        except ValueError:
            bad.append((no, "non-numeric rank or score"))
    _raise_bad(path, bad)
    out = {}
    for qid, hits in rows.items():
        hits.sort()
        if [h[0] for h in hits] != list(range(1, len(hits) + 1)):
            raise DataFormatError(f"{path}: ranks for query {qid!r} are not 1..n")
        out[qid] = [(d, s) for _, d, s in hits]
    return out
