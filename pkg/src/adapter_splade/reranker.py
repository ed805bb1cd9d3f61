"""Cross-encoder reranker: ``[START] q [SEP] d`` through the encoder, a linear
head on the position-0 hidden state, one relevance score per pair."""

from __future__ import annotations

from dataclasses import asdict, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Tokenizer, TrainingExample
from .encoder import (
    AdapterConfig,
    Encoder,
    EncoderConfig,
    TokenSequence,
    backbone_shapes,
    collate,
    init_adapters,
    init_backbone,
    set_trainable,
)
from .index import RankedList
from .metrics import mrr_at_k
from .objectives import pair_contrastive_loss
from .params import ParameterStore
from .sparse import SpladeModel
from .trainer import Adam, CheckpointRecord, TrainConfig, TrainingError, run_loop

CLS_WEIGHT = "cls.weight"
CLS_BIAS = "cls.bias"
SEGMENT = "embeddings.segment"
# fields that must agree between a first-stage checkpoint and the reranker
COMPATIBLE_FIELDS = ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size",
                     "max_seq_len", "layer_norm_eps")


class ConfigMismatchError(ValueError):
    pass


def reranker_adapters(**kw) -> AdapterConfig:
    """Adapter settings for reranking: adapters plus the scalar head train,
    everything copied from the first stage stays frozen."""
    kw.setdefault("train_layernorms", False)
    kw.setdefault("train_lm_head", True)
    return AdapterConfig(**kw)


def init_cls_head(store: ParameterStore, hidden_dim: int, seed: int = 0, init_std: float = 0.02) -> None:
    rng = np.random.default_rng(seed)
    for name in (CLS_WEIGHT, CLS_BIAS):
        if name in store:
            store.remove(name)
    store.add(CLS_WEIGHT, rng.normal(0.0, init_std, (hidden_dim, 1)))
    store.add(CLS_BIAS, np.zeros(1))


class CrossEncoder:
    def __init__(self, config: EncoderConfig, adapters: AdapterConfig | None, store: ParameterStore):
        if not config.num_segments:
            raise ValueError("a cross-encoder needs segment embeddings (num_segments >= 2)")
        self.config = config
        self.adapters = adapters
        self.store = store
        self.encoder = Encoder(config, adapters, store)

    @classmethod
    def create(cls, config: EncoderConfig, adapters: AdapterConfig | None = None,
               mode: str = "finetune-all", seed: int = 0) -> "CrossEncoder":
        """Reranker trained from a fresh random backbone."""
        config = replace(config, num_segments=max(config.num_segments, 2))
        store = init_backbone(config, seed=seed)
        if adapters is not None:
            init_adapters(store, config, adapters, seed=seed + 1)
        init_cls_head(store, config.hidden_dim, seed=seed + 2)
        set_trainable(store, adapters, mode, config.num_layers)
        return cls(config, adapters, store)

    @property
    def mode(self) -> str:
        trainable = set(self.store.trainable_names())
        if trainable == set(self.store.names()):
            return "finetune-all"
        return "adapter-tune" if any(n.startswith("adapters.") for n in trainable) else "head-only"

    def scores(self, seqs: Sequence[TokenSequence]) -> Tensor:
        """(B,) relevance scores; differentiable under a tape."""
        ids, mask, segs = collate(seqs, self.config.max_seq_len)
        h = self.encoder.encode_batch(ids, mask, "shared", segs)
        first = h[:, 0, :]
        out = ad.matmul(first, self.store.tensor(CLS_WEIGHT))
        return out.reshape(len(seqs)) + self.store.tensor(CLS_BIAS)

    def cross_encode(self, pair: TokenSequence) -> float:
        return float(self.scores([pair]).value[0])

    def score_pairs(self, tokenizer: Tokenizer, pairs: Sequence[tuple[str, str]],
                    batch_size: int = 64) -> np.ndarray:
        seqs = [tokenizer.encode_pair(q, d, self.config.max_seq_len) for q, d in pairs]
        out = np.empty(len(seqs))
        order = np.argsort([len(s) for s in seqs], kind="stable")
        for start in range(0, len(seqs), batch_size):
            idx = order[start : start + batch_size]
            out[idx] = self.scores([seqs[i] for i in idx]).value
        return out

    def scorer(self, tokenizer: Tokenizer, collection: Mapping[str, str],
               queries: Mapping[str, str]) -> Callable[[str, Sequence[str]], np.ndarray]:
        def score(qid: str, doc_ids: Sequence[str]) -> np.ndarray:
            q = queries[qid]
            return self.score_pairs(tokenizer, [(q, collection[d]) for d in doc_ids])

        return score

    def save(self, path, extra: dict | None = None):
        return save_checkpoint(path, self.store, self.config, self.adapters, kind="reranker", extra=extra)


def _source(checkpoint):
    if isinstance(checkpoint, SpladeModel):
        return checkpoint.store, checkpoint.config
    store, config, _, _ = load_checkpoint(checkpoint)
    return store, config


def init_from_first_stage(checkpoint, mode: str = "finetune-all", seed: int = 0,
                          adapters: AdapterConfig | None = None,
                          expected: EncoderConfig | None = None) -> CrossEncoder:
    """Copy the first-stage backbone (embeddings and transformer layers) bit
    for bit, drop the SPLADE head and any first-stage adapters, add a fresh
    segment table and scalar head.  ``adapter-tune`` freezes everything copied
    and adds fresh adapters; ``finetune-all`` trains everything.

    ``checkpoint`` is a :class:`SpladeModel` or a checkpoint path;
    ``expected`` is the reranker architecture the caller wants.
    """
    if mode not in ("finetune-all", "adapter-tune"):
        raise ValueError(f"unsupported reranker mode {mode!r}")
    src_store, src_config = _source(checkpoint)
    if expected is not None:
        diff = [f"{f}: checkpoint {getattr(src_config, f)!r} != expected {getattr(expected, f)!r}"
                for f in COMPATIBLE_FIELDS if getattr(src_config, f) != getattr(expected, f)]
        if diff:
            raise ConfigMismatchError("incompatible first-stage checkpoint; " + "; ".join(diff))
    config = replace(src_config, num_segments=max(src_config.num_segments, 2))
    store = ParameterStore()
    for name, shape in backbone_shapes(config).items():
        if name == SEGMENT and (name not in src_store or src_store[name].shape != shape):
            rng = np.random.default_rng([seed, 1])
            store.add(name, rng.normal(0.0, 0.02, shape))
            continue
        if name not in src_store:
            raise ConfigMismatchError(f"checkpoint lacks backbone parameter {name}")
        if src_store[name].shape != shape:
            raise ConfigMismatchError(f"{name}: checkpoint shape {src_store[name].shape} != {shape}")
        store.add(name, src_store[name].copy())
    if mode == "adapter-tune":
        adapters = adapters or reranker_adapters()
        init_adapters(store, config, adapters, seed=seed + 1)
    else:
        adapters = None
    init_cls_head(store, config.hidden_dim, seed=seed)
    set_trainable(store, adapters, mode, config.num_layers)
    return CrossEncoder(config, adapters, store)


def rerank(run, depth: int, scorer: Callable[[str, Sequence[str]], Sequence[float]],
           collection: Mapping[str, str] | None = None) -> dict[str, list[tuple[str, float]]]:
    """Rescore each query's top-``depth`` and order by (score desc, doc id asc).

    ``run`` maps query id -> hits (``[(doc_id, score), ...]`` or a
    :class:`RankedList`); documents below ``depth`` are dropped.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    out = {}
    for qid, hits in run.items():
        if isinstance(hits, RankedList):
            hits = hits.hits
        docs = [h[0] if isinstance(h, tuple) else h for h in hits][:depth]
        if collection is not None:
            for d in docs:
                if d not in collection:
                    raise KeyError(f"document {d!r} (query {qid}) is not in the collection")
        scores = np.asarray(scorer(qid, docs), dtype=np.float64) if docs else np.zeros(0)
        if scores.shape != (len(docs),):
            raise ContractError(f"scorer returned {scores.shape} scores for {len(docs)} documents")
        order = sorted(range(len(docs)), key=lambda i: (-scores[i], docs[i]))
        out[qid] = [(docs[i], float(scores[i])) for i in order]
    return out


def train_reranker(model: CrossEncoder, tokenizer: Tokenizer, collection: Mapping[str, str],
                   queries: Mapping[str, str], examples: Sequence[TrainingExample], config: TrainConfig,
                   dev_run, dev_qrels, depth: int = 50, out_dir=None) -> CheckpointRecord:
    """Contrastive training over {positive, negative} per query, no in-batch
    negatives; checkpoints are selected by MRR@10 of the reranked dev run."""
    examples = list(examples)
    if not examples:
        raise ContractError("no training examples")
    optimizer = Adam(config.beta1, config.beta2, config.adam_eps)
    n = model.config.max_seq_len

    def pair(qid, did):
        return tokenizer.encode_pair(queries[qid], collection[did], n)

    def step_fn(idx, step, lr):
        batch = [examples[i] for i in idx]
        seqs = [pair(e.qid, e.pos_id) for e in batch] + [pair(e.qid, e.neg_id) for e in batch]
        with Tape() as tape:
            s = model.scores(seqs)
            B = len(batch)
            loss = pair_contrastive_loss(s[:B], s[B:])
        value = float(loss.value)
        if not np.isfinite(value):
            ids = [(e.qid, e.pos_id, e.neg_id) for e in batch]
            raise TrainingError(f"non-finite loss {value} at step {step}; batch (qid, pos, neg): {ids}")
        optimizer.step(model.store, ad.backward(tape, loss), lr)
        return {"loss": value, "lr": lr}

    def evaluate():
        reranked = rerank(dev_run, depth, model.scorer(tokenizer, collection, queries), collection)
        return mrr_at_k(reranked, dev_qrels, 10)

    def save(path):
        model.save(path, extra={"train": asdict(config), "vocab": tokenizer.to_list()})

    best, _ = run_loop(model.store, config, len(examples), step_fn, evaluate, save, out_dir)
    return best
