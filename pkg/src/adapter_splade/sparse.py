"""SPLADE head: vocabulary term logits, log-saturated max pooling, dot scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    AdapterConfig,
    Encoder,
    EncoderConfig,
    TokenSequence,
    adapter_shapes,
    backbone_shapes,
    collate,
)
from .params import ParameterStore


@dataclass(frozen=True)
class SparseVector:
    """Sorted term ids with strictly positive weights."""

    ids: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if ids.shape != w.shape:
            raise ValueError("ids and weights differ in length")
        if ids.size and np.any(np.diff(ids) <= 0):
            raise ValueError("term ids must be strictly increasing")
        if np.any(w <= 0):
            raise ValueError("sparse weights must be > 0")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseVector":
        dense = np.asarray(dense)
        nz = np.flatnonzero(dense > 0)
        return cls(nz, dense[nz])

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "SparseVector":
        pairs = sorted((int(t), float(w)) for t, w in pairs if w > 0)
        if not pairs:
            return cls.empty()
        ids, w = zip(*pairs)
        return cls(np.array(ids), np.array(w))

    @classmethod
    def empty(cls) -> "SparseVector":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def to_dense(self, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        out[self.ids] = self.weights
        return out

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        return (
            isinstance(other, SparseVector)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash((self.ids.tobytes(), self.weights.tobytes()))


def score(q: SparseVector, d: SparseVector) -> float:
    """Dot product over shared term ids (two-pointer merge)."""
    qi, qw, di, dw = q.ids, q.weights, d.ids, d.weights
    i = j = 0
    total = 0.0
    while i < len(qi) and j < len(di):
        a, b = qi[i], di[j]
        if a == b:
            total += qw[i] * dw[j]
            i += 1
            j += 1
        elif a < b:
            i += 1
        else:
            j += 1
    return float(total)


def format_sparse(docid: str, vec: SparseVector) -> str:
    """``docid<TAB>term:weight term:weight ...`` with 6-decimal weights."""
    terms = " ".join(f"{t}:{w:.6f}" for t, w in zip(vec.ids, vec.weights))
    return f"{docid}\t{terms}"


def parse_sparse(line: str) -> tuple[str, SparseVector]:
    docid, _, rest = line.rstrip("\n").partition("\t")
    pairs = []
    for tok in rest.split():
        t, _, w = tok.partition(":")
        pairs.append((int(t), float(w)))
    return docid, SparseVector.from_pairs(pairs)


# -- head parameters --------------------------------------------------------

HEAD_SIDES = ("query", "document")


def head_prefix(side: str, split: bool) -> str:
    return f"head.{side}" if split else "head"


def head_shapes(config: EncoderConfig, split: bool = False) -> dict[str, tuple[int, ...]]:
    d = config.hidden_dim
    shapes = {}
    for side in (HEAD_SIDES if split else ("shared",)):
        p = head_prefix(side, split)
        shapes[f"{p}.transform.weight"] = (d, d)
        shapes[f"{p}.transform.bias"] = (d,)
        shapes[f"{p}.ln.gain"] = (d,)
        shapes[f"{p}.ln.bias"] = (d,)
        shapes[f"{p}.vocab_bias"] = (config.vocab_size,)
    return shapes


def splade_shapes(config: EncoderConfig, adapters: AdapterConfig | None) -> dict[str, tuple[int, ...]]:
    """Full parameter inventory without allocating anything."""
    shapes = dict(backbone_shapes(config))
    if adapters is not None:
        shapes.update(adapter_shapes(config, adapters))
    shapes.update(head_shapes(config, adapters.split_head if adapters else False))
    return shapes


def init_head(store: ParameterStore, config: EncoderConfig, split: bool = False,
              seed: int = 0, init_std: float = 0.02) -> None:
    rng = np.random.default_rng(seed)
    for name, shape in head_shapes(config, split).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif len(shape) == 2:
            value = rng.normal(0.0, init_std, shape)
        else:
            value = np.zeros(shape)
        store.add(name, value)


# -- forward ----------------------------------------------------------------


def term_logits(store: ParameterStore, h, config: EncoderConfig, prefix: str = "head",
                with_bias: bool = True) -> Tensor:
    """w_ij = LN(gelu(h_i W + b)) . E_j + b_j, with E the token embedding table."""
    t = ad.gelu(ad.matmul(h, store.tensor(f"{prefix}.transform.weight")) + store.tensor(f"{prefix}.transform.bias"))
    t = ad.layer_norm(t, store.tensor(f"{prefix}.ln.gain"), store.tensor(f"{prefix}.ln.bias"), config.layer_norm_eps)
    table = store.tensor("embeddings.token")
    out = ad.matmul(t, ad.transpose(table, (1, 0)))
    return out + store.tensor(f"{prefix}.vocab_bias") if with_bias else out


def pool_dense(logits, mask) -> Tensor:
    """max over unmasked positions of log(1 + relu(logits)); (B, n, V) -> (B, V).

    log1p(relu(.)) is monotone, so the max is taken on raw logits first; the
    value and the gradient are identical and the (B, n, V) elementwise pass
    is avoided.
    """
    return ad.log1p_clamp(ad.masked_max(logits, mask, axis=-2))


def pool(logits, mask=None) -> SparseVector:
    logits = logits.value if isinstance(logits, Tensor) else np.asarray(logits)
    mask = np.ones(logits.shape[0]) if mask is None else np.asarray(mask)
    dense = pool_dense(logits[None], mask[None]).value[0]
    return SparseVector.from_dense(dense)


class SpladeModel:
    """Encoder + SPLADE head sharing one :class:`ParameterStore`."""

    def __init__(self, config: EncoderConfig, adapters: AdapterConfig | None, store: ParameterStore):
        self.config = config
        self.adapters = adapters
        self.store = store
        self.encoder = Encoder(config, adapters, store)

    @classmethod
    def create(cls, config: EncoderConfig, adapters: AdapterConfig | None, seed: int = 0,
               **init_kw) -> "SpladeModel":
        from .encoder import init_adapters, init_backbone

        store = init_backbone(config, seed=seed, **init_kw)
        if adapters is not None:
            init_adapters(store, config, adapters, seed=seed + 1)
        init_head(store, config, split=adapters.split_head if adapters else False, seed=seed + 2)
        return cls(config, adapters, store)

    def adapter_set(self, side: str) -> str | None:
        if self.adapters is None:
            return None
        return self.adapters.set_for(side)

    def head_prefix(self, side: str) -> str:
        split = self.adapters.split_head if self.adapters else False
        return head_prefix(side, split)

    def logits(self, ids, mask, side: str = "document", with_bias: bool = True,
               dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        h = self.encoder.encode_batch(ids, mask, self.adapter_set(side))
        if dropout > 0.0:
            rng = rng if rng is not None else np.random.default_rng()
            keep = rng.random(h.shape) >= dropout
            h = h * (keep / (1.0 - dropout))
        return term_logits(self.store, h, self.config, self.head_prefix(side), with_bias)

    def represent(self, seqs: Sequence[TokenSequence], side: str = "document",
                  dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        """Dense pooled term weights (B, |V|); differentiable under a tape.

        The vocabulary bias is constant over positions, so it is added after
        the max: max_i(w_ij) + b_j == max_i(w_ij + b_j).  ``dropout`` (train
        time only) drops encoder outputs before the head, hence before the max.
        """
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        ids, mask, _ = collate(seqs, self.config.max_seq_len)
        raw = ad.masked_max(self.logits(ids, mask, side, False, dropout, rng), mask, axis=-2)
        bias = self.store.tensor(f"{self.head_prefix(side)}.vocab_bias")
        return ad.log1p_clamp(raw + bias)

    def encode_dense(self, seqs: Sequence[TokenSequence], side: str = "document",
                     batch_size: int = 64) -> np.ndarray:
        out = []
        order = np.argsort([len(s) for s in seqs], kind="stable")
        for start in range(0, len(seqs), batch_size):
            chunk = [seqs[i] for i in order[start : start + batch_size]]
            out.append(self.represent(chunk, side).value)
        if not out:
            return np.zeros((0, self.config.vocab_size))
        dense = np.concatenate(out)
        result = np.empty_like(dense)
        result[order] = dense
        return result

    def encode_sparse(self, seqs: Sequence[TokenSequence], side: str = "document",
                      batch_size: int = 64) -> list[SparseVector]:
        return [SparseVector.from_dense(row) for row in self.encode_dense(seqs, side, batch_size)]

    def astype(self, dtype) -> "SpladeModel":
        return SpladeModel(self.config, self.adapters, self.store.astype(dtype))
