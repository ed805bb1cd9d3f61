"""Training loops: triplet / distillation training with dev-MRR checkpoint
selection, the adapter-layer ablation sweep, hard-negative mining and
multi-round domain adaptation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape
from .checkpoint import save_checkpoint
from .data import Tokenizer, TrainingExample
from .encoder import MODES, AdapterConfig, EncoderConfig, ablate, count_params, init_adapters, set_trainable
from .index import InvertedIndex, _top_k, build_index, estimate_rflops, search
from .metrics import mrr_at_k, ndcg_at_k, recall_at_k
from .objectives import (
    RegularizerConfig,
    contrastive_loss,
    in_batch_mask,
    lambda_at,
    margin_mse_loss,
    total_loss,
)
from .params import ParameterStore
from .sparse import SparseVector, SpladeModel

TRAIN_MODES = ("triplets", "distill")
SCHEDULES = ("linear", "constant")


class TrainingError(RuntimeError):
    """Non-finite loss; the message lists the offending batch."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    iterations: int = 1000
    warmup_steps: int = 100
    eval_every: int = 250
    seed: int = 0
    mode: str = "triplets"
    encoder_mode: str = "adapter-tune"
    bi_adapter: bool = False
    schedule: str = "linear"  # linear: warmup then decay to 0; constant: warmup then flat
    in_batch: str = "all"
    eval_at_start: bool = True
    eval_k: int = 10
    eval_dtype: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: float | None = None  # optional cap in passes over the examples
    dropout: float = 0.0  # on encoder outputs before the SPLADE head, training only

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        for name in ("batch_size", "eval_every", "eval_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or self.warmup_steps < 0:
            raise ValueError("iterations and warmup_steps must be >= 0")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {TRAIN_MODES}")
        if self.encoder_mode not in MODES:
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}; expected one of {MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs is not None and self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def total_steps(self, num_examples: int) -> int:
        """Iterations after applying the epoch cap."""
        if self.epochs is None:
            return self.iterations
        return min(self.iterations, math.ceil(self.epochs * num_examples / self.batch_size))


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    mrr: float
    path: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.mrr <= 1.0:
            raise ValueError(f"MRR {self.mrr} outside [0, 1]")


def learning_rate_at(step: int, config: TrainConfig) -> float:
    """Rate for the update at 0-based ``step``."""
    lr, warm = config.learning_rate, config.warmup_steps
    if warm and step < warm:
        return lr * (step + 1) / warm
    if config.schedule == "constant" or config.iterations <= warm:
        return lr
    return lr * max(0.0, (config.iterations - step) / (config.iterations - warm))


def select_best(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Highest MRR; the earliest record wins ties."""
    if not records:
        raise ContractError("no checkpoints to select from")
    best = records[0]
    for r in records[1:]:
        if r.mrr > best.mrr:
            best = r
    return best


class Adam:
    """Adam over the trainable entries of a store, updating arrays in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: ParameterStore, grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(grads):
            if not store.trainable.get(name, False):
                continue
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            store.values[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _snapshot(store: ParameterStore) -> dict[str, np.ndarray]:
    return {n: store[n].copy() for n in store.trainable_names()}


def _restore(store: ParameterStore, snap: Mapping[str, np.ndarray]) -> None:
    for n, v in snap.items():
        store.values[n][...] = v


def run_loop(store: ParameterStore, config: TrainConfig, num_examples: int,
             step_fn: Callable[[np.ndarray, int, float], dict],
             evaluate: Callable[[], float],
             save: Callable[[Path], None] | None = None,
             out_dir=None) -> tuple[CheckpointRecord, list[CheckpointRecord]]:
    """Shared optimisation loop.

    ``step_fn(example_indices, step, lr)`` performs one update and returns a
    dict of logged values.  The store ends holding the best checkpoint.
    """
    if num_examples == 0:
        raise ContractError("no training examples")
    config = replace(config, iterations=config.total_steps(num_examples), epochs=None)
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = open(out / "metrics.jsonl", "w", encoding="utf-8")
    records: list[CheckpointRecord] = []
    best_snap, best_path = None, None

    def checkpoint(step: int):
        nonlocal best_snap, best_path
        mrr = float(evaluate())
        improved = not records or mrr > select_best(records).mrr
        path = None
        if improved:
            best_snap = _snapshot(store)
            if out is not None and save is not None:
                path = str(out / "best.ckpt")
                save(Path(path))
                best_path = path
        records.append(CheckpointRecord(step, mrr, path))
        if log is not None:
            log.write(json.dumps({"step": step, "eval_mrr": mrr}) + "\n")
            log.flush()

    order = np.zeros(0, dtype=np.int64)
    try:
        if config.eval_at_start:
            checkpoint(0)
        for step in range(config.iterations):
            while len(order) < config.batch_size:
                order = np.concatenate([order, rng.permutation(num_examples)])
            batch, order = order[: config.batch_size], order[config.batch_size :]
            info = step_fn(batch, step, learning_rate_at(step, config))
            if log is not None:
                log.write(json.dumps({"step": step + 1, **info}) + "\n")
            done = step + 1
            if done % config.eval_every == 0 or done == config.iterations:
                checkpoint(done)
        if not records:
            checkpoint(0)
    finally:
        if log is not None:
            log.close()
    best = select_best(records)
    _restore(store, best_snap)
    if best_path is not None:
        best = replace(best, path=best_path)
    return best, records


# -- retrieval helpers ------------------------------------------------------


def brute_force_run(model: SpladeModel, tokenizer: Tokenizer, collection: Mapping[str, str],
                    queries: Mapping[str, str], k: int = 10, dtype: str = "float64",
                    batch_size: int = 64) -> dict[str, list[tuple[str, float]]]:
    """Index-free exact retrieval: dense query x document scores, same ordering
    rule as :func:`adapter_splade.index.search`."""
    if dtype != "float64":
        model = model.astype(np.dtype(dtype))
    doc_ids = sorted(collection)
    D = model.encode_dense([tokenizer.encode(collection[d]) for d in doc_ids], "document", batch_size)
    qids = list(queries)
    Q = model.encode_dense([tokenizer.encode(queries[q]) for q in qids], "query", batch_size)
    S = (Q @ D.T).astype(np.float64)
    run = {}
    for qid, row in zip(qids, S):
        run[qid] = [(doc_ids[i], float(row[i])) for i in _top_k(row, k)]
    return run


def encode_corpus(model: SpladeModel, tokenizer: Tokenizer, texts: Mapping[str, str],
                  side: str, batch_size: int = 64) -> dict[str, SparseVector]:
    ids = list(texts)
    vecs = model.encode_sparse([tokenizer.encode(texts[i]) for i in ids], side, batch_size)
    return dict(zip(ids, vecs))


def index_model(model: SpladeModel, tokenizer: Tokenizer, collection: Mapping[str, str]) -> InvertedIndex:
    docs = encode_corpus(model, tokenizer, collection, "document")
    return build_index(docs.items(), model.config.vocab_size)


def index_run(index: InvertedIndex, query_reps: Mapping[str, SparseVector], k: int):
    return {q: search(index, v, k, q).hits for q, v in query_reps.items()}


# -- first-stage training ---------------------------------------------------


class SpladeTrainer:
    """Holds a model plus the text tables its training examples refer to."""

    def __init__(self, model: SpladeModel, tokenizer: Tokenizer, collection: Mapping[str, str],
                 queries: Mapping[str, str], config: TrainConfig,
                 regularizer: RegularizerConfig | None = None):
        self.model = model
        self.tokenizer = tokenizer
        self.collection = collection
        self.queries = queries
        self.config = config
        self.regularizer = regularizer or RegularizerConfig()
        self.optimizer = Adam(config.beta1, config.beta2, config.adam_eps)
        self._cache: dict[tuple[str, str], object] = {}
        self._dropout_rng = np.random.default_rng([config.seed, 3])

    def _tokens(self, kind: str, key: str):
        hit = self._cache.get((kind, key))
        if hit is None:
            table = self.queries if kind == "q" else self.collection
            if key not in table:
                raise KeyError(f"unknown {'query' if kind == 'q' else 'document'} id {key!r}")
            hit = self._cache[(kind, key)] = self.tokenizer.encode(table[key])
        return hit

    def batch_loss(self, batch: Sequence[TrainingExample], step: int):
        """Total loss tensor (must run under a tape for gradients) and its parts."""
        B = len(batch)
        qs = [self._tokens("q", e.qid) for e in batch]
        ds = [self._tokens("d", e.pos_id) for e in batch] + [self._tokens("d", e.neg_id) for e in batch]
        p, rng = self.config.dropout, self._dropout_rng
        Q = self.model.represent(qs, "query", p, rng)
        D = self.model.represent(ds, "document", p, rng)
        if self.config.mode == "triplets":
            scores = Q @ D.transpose(1, 0)
            cand = in_batch_mask(B, self.config.in_batch)
            # a document repeated in the batch must not act as its own negative
            doc_ids = [e.pos_id for e in batch] + [e.neg_id for e in batch]
            for i, e in enumerate(batch):
                for j, d in enumerate(doc_ids):
                    if j != i and d == e.pos_id:
                        cand[i, j] = False
            task = contrastive_loss(scores, np.arange(B), cand)
        else:
            if any(e.teacher_pos is None or e.teacher_neg is None for e in batch):
                raise ContractError("distill mode needs teacher scores on every example")
            pos = (Q * D[:B]).sum(axis=-1)
            neg = (Q * D[B:]).sum(axis=-1)
            task = margin_mse_loss(pos, neg, [e.teacher_margin for e in batch])
        loss = total_loss(task, Q, D, step, self.regularizer)
        return loss, task

    def train_step(self, batch: Sequence[TrainingExample], step: int, lr: float | None = None) -> dict:
        if lr is None:
            lr = learning_rate_at(step, self.config)
        with Tape() as tape:
            loss, task = self.batch_loss(batch, step)
        value = float(loss.value)
        if not math.isfinite(value):
            ids = [(e.qid, e.pos_id, e.neg_id) for e in batch]
            raise TrainingError(f"non-finite loss {value} at step {step}; batch (qid, pos, neg): {ids}")
        grads = ad.backward(tape, loss)
        self.optimizer.step(self.model.store, grads, lr)
        lq, ld = lambda_at(step, self.regularizer)
        return {"loss": value, "task_loss": float(task.value), "lambda_q": lq, "lambda_d": ld, "lr": lr}

    def evaluate(self, queries: Mapping[str, str], qrels, k: int | None = None) -> float:
        k = k or self.config.eval_k
        run = brute_force_run(self.model, self.tokenizer, self.collection, queries, k,
                              self.config.eval_dtype)
        return mrr_at_k(run, qrels, k)

    def train(self, examples: Sequence[TrainingExample], dev_queries: Mapping[str, str], dev_qrels,
              out_dir=None) -> CheckpointRecord:
        """Run the loop; the model ends on the best-dev checkpoint, which is returned."""
        best, self.records = self.train_with_history(examples, dev_queries, dev_qrels, out_dir)
        return best

    def train_with_history(self, examples, dev_queries, dev_qrels, out_dir=None):
        examples = list(examples)
        if not examples or not dev_queries:
            raise ContractError("training needs examples and validation queries")

        def step_fn(idx, step, lr):
            return self.train_step([examples[i] for i in idx], step, lr)

        def save(path):
            save_checkpoint(path, self.model.store, self.model.config, self.model.adapters,
                            extra={"train": asdict(self.config), "vocab": self.tokenizer.to_list()})

        return run_loop(self.model.store, self.config, len(examples), step_fn,
                        lambda: self.evaluate(dev_queries, dev_qrels), save, out_dir)


def build_model(config: EncoderConfig, train: TrainConfig, adapters: AdapterConfig | None = None,
                seed: int | None = None) -> SpladeModel:
    """Fresh model with the trainable set for ``train.encoder_mode`` applied."""
    if train.encoder_mode == "adapter-tune" or adapters is not None:
        adapters = adapters or AdapterConfig()
        sets = ("query", "document") if train.bi_adapter else ("shared",)
        adapters = replace(adapters, adapter_sets=sets)
    model = SpladeModel.create(config, adapters, seed=train.seed if seed is None else seed)
    set_trainable(model.store, adapters, train.encoder_mode, config.num_layers)
    return model


# -- ablation ---------------------------------------------------------------


ABLATION_COLUMNS = ("k", "removed", "mrr10", "rflops", "trainable", "total", "trainable_percent",
                    "train_seconds", "best_step")


def _removed_label(k: int) -> str:
    if k == 0:
        return "none"
    return "0" if k == 1 else f"0-{k - 1}"


def run_ablation_suite(config: EncoderConfig, adapters: AdapterConfig, train: TrainConfig,
                       data, ks: Sequence[int] | None = None,
                       regularizer: RegularizerConfig | None = None,
                       examples: Sequence[TrainingExample] | None = None) -> list[dict]:
    """Train one adapter-tuned model per k with adapters removed from layers
    0..k-1 and report test MRR@10, R-FLOPS, parameter share and train time.

    ``data`` needs ``collection``, ``queries[split]``, ``qrels[split]``,
    ``triplets`` and a ``tokenizer()``, as produced by the synthetic generator.
    """
    L = config.num_layers
    ks = list(range(L + 1)) if ks is None else list(ks)
    for k in ks:
        if not 0 <= k <= L:
            raise ValueError(f"k={k} outside [0, {L}]")
    tok = data.tokenizer()
    examples = list(examples if examples is not None else data.triplets)
    train = replace(train, encoder_mode="adapter-tune")
    rows = []
    for k in ks:
        model = build_model(config, train, ablate(adapters, k, L))
        trainer = SpladeTrainer(model, tok, data.collection, data.all_queries(), train, regularizer)
        t0 = time.perf_counter()
        best = trainer.train(examples, data.queries["dev"], data.qrels["dev"])
        seconds = time.perf_counter() - t0
        index = index_model(model, tok, data.collection)
        qreps = encode_corpus(model, tok, data.queries["test"], "query")
        run = index_run(index, qreps, 10)
        count = count_params(model.store)
        rows.append({
            "k": k,
            "removed": _removed_label(k),
            "mrr10": mrr_at_k(run, data.qrels["test"], 10),
            "rflops": estimate_rflops(index, list(qreps.values())),
            "trainable": count.trainable,
            "total": count.total,
            "trainable_percent": count.percent,
            "train_seconds": seconds,
            "best_step": best.step,
        })
    return rows


def format_table(rows: Sequence[dict], columns: Sequence[str] = ABLATION_COLUMNS) -> str:
    """Tab-separated table with a header line."""
    lines = ["\t".join(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r[c]
            cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


# -- hard negatives and domain adaptation -----------------------------------


@dataclass
class MiningResult:
    examples: list[TrainingExample]
    skipped_no_positive: int = 0
    skipped_no_negative: int = 0


def mine_hard_negatives(index: InvertedIndex, query_reps: Mapping[str, SparseVector], qrels,
                        depth: int, negatives_per_query: int = 1, seed: int = 0) -> MiningResult:
    """Negatives are drawn uniformly from the top-``depth`` retrieved documents
    that are not judged relevant; positives uniformly from the qrels."""
    if depth < 1 or negatives_per_query < 1:
        raise ValueError("depth and negatives_per_query must be positive")
    rng = np.random.default_rng(seed)
    result = MiningResult([])
    for qid in sorted(query_reps):
        judged = qrels.get(qid, {})
        positives = sorted(d for d, r in judged.items() if r > 0)
        if not positives:
            result.skipped_no_positive += 1
            continue
        hits = search(index, query_reps[qid], depth, qid).hits
        negatives = [d for d, _ in hits if judged.get(d, 0) <= 0]
        if not negatives:
            result.skipped_no_negative += 1
            continue
        for _ in range(negatives_per_query):
            pos = positives[rng.integers(len(positives))]
            neg = negatives[rng.integers(len(negatives))]
            result.examples.append(TrainingExample(qid, pos, neg))
    return result


@dataclass
class RoundResult:
    round: int
    test_mrr: float
    test_ndcg: float
    test_recall: float
    dev_mrr: float
    examples: int = 0
    skipped: int = 0
    best_step: int = 0
    extra: dict = field(default_factory=dict)


def _evaluate_split(model, tok, collection, queries, qrels, index=None):
    index = index or index_model(model, tok, collection)
    run = index_run(index, encode_corpus(model, tok, queries, "query"), 100)
    return mrr_at_k(run, qrels, 10), ndcg_at_k(run, qrels, 10), recall_at_k(run, qrels, 100)


def adapt_domain(model: SpladeModel, tokenizer: Tokenizer, target, rounds: int, train: TrainConfig,
                 regularizer: RegularizerConfig | None = None, epochs: int = 1, depth: int = 30,
                 negatives_per_query: int = 4, adapters: AdapterConfig | None = None,
                 log: Callable[[str], None] | None = None) -> tuple[list[RoundResult], SpladeModel]:
    """Zero-shot evaluation followed by ``rounds`` of mine -> train -> select.

    ``target`` provides ``collection``, ``queries[split]`` and ``qrels[split]``.
    The start model is not modified.  In adapter-tune mode a model without
    adapters receives fresh identity-initialised ones; a model that already
    has adapters keeps training them.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    store = model.store.copy()
    acfg = model.adapters
    if train.encoder_mode == "adapter-tune" and acfg is None:
        acfg = adapters or AdapterConfig()
        init_adapters(store, model.config, acfg, seed=train.seed + 1)
    current = SpladeModel(model.config, acfg, store)
    set_trainable(store, acfg, train.encoder_mode, model.config.num_layers)

    coll, Qs, R = target.collection, target.queries, target.qrels
    all_q = {**Qs["train"], **Qs["dev"], **Qs["test"]}
    index = index_model(current, tokenizer, coll)
    mrr, ndcg, rec = _evaluate_split(current, tokenizer, coll, Qs["test"], R["test"], index)
    dev = mrr_at_k(brute_force_run(current, tokenizer, coll, Qs["dev"], 10), R["dev"], 10)
    results = [RoundResult(0, mrr, ndcg, rec, dev)]
    if log:
        log(f"round 0: test MRR@10 {mrr:.4f} dev {dev:.4f}")
    for r in range(1, rounds + 1):
        qreps = encode_corpus(current, tokenizer, Qs["train"], "query")
        mined = mine_hard_negatives(index, qreps, R["train"], depth, negatives_per_query,
                                    seed=train.seed + r)
        if not mined.examples:
            raise ContractError(f"round {r}: mining produced no training examples")
        per_epoch = max(1, math.ceil(len(mined.examples) / train.batch_size))
        cfg = replace(train, iterations=epochs * per_epoch, eval_every=per_epoch,
                      eval_at_start=True, seed=train.seed + r)
        trainer = SpladeTrainer(current, tokenizer, coll, all_q, cfg, regularizer)
        best = trainer.train(mined.examples, Qs["dev"], R["dev"])
        index = index_model(current, tokenizer, coll)
        mrr, ndcg, rec = _evaluate_split(current, tokenizer, coll, Qs["test"], R["test"], index)
        results.append(RoundResult(r, mrr, ndcg, rec, best.mrr, len(mined.examples),
                                   mined.skipped_no_positive + mined.skipped_no_negative, best.step))
        if log:
            log(f"round {r}: test MRR@10 {mrr:.4f} dev {best.mrr:.4f} (step {best.step})")
    return results, current


# -- gradient verification --------------------------------------------------


def objective_gradient_check(mode: str = "triplets", seed: int = 0, step: float = 1e-5,
                             samples: int = 50, config: EncoderConfig | None = None) -> float:
    """grad_check of the full objective (encode -> pool -> score -> ranking loss
    + ramped FLOPS terms) on a small random model with every parameter
    trainable.  Adapter up-projections are perturbed away from zero so the
    adapter paths carry gradient to their down-projections."""
    from .encoder import TokenSequence

    config = config or EncoderConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32,
                                     vocab_size=50, max_seq_len=16)
    adapters = AdapterConfig(reduction_factor=4)
    model = SpladeModel.create(config, adapters, seed=seed)
    rng = np.random.default_rng([seed, 5])
    for n in model.store.names():
        if n.endswith("up.weight"):
            model.store.values[n][...] = rng.normal(0.0, 0.1, model.store[n].shape)
    model.store.set_all_trainable(True)
    V = config.vocab_size
    qs = [TokenSequence(rng.integers(4, V, size=rng.integers(2, 5))) for _ in range(2)]
    ds = [TokenSequence(rng.integers(4, V, size=rng.integers(3, 8))) for _ in range(4)]
    reg = RegularizerConfig(lambda_q=0.1, lambda_d=0.05, ramp_steps=20)
    margins = rng.normal(0.0, 1.0, 2)

    def objective(store):
        m = SpladeModel(config, adapters, store)
        Q = m.represent(qs, "query")
        D = m.represent(ds, "document")
        if mode == "triplets":
            task = contrastive_loss(Q @ D.transpose(1, 0), np.arange(2), in_batch_mask(2, "all"))
        elif mode == "distill":
            task = margin_mse_loss((Q * D[:2]).sum(axis=-1), (Q * D[2:]).sum(axis=-1), margins)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return total_loss(task, Q, D, 10, reg)

    return ad.grad_check(objective, model.store, step=step, samples=samples, seed=seed)
