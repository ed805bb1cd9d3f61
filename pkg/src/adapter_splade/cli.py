"""Command-line entry point: ``adapter-splade <command> [options]``.

Every command accepts ``--config FILE``, repeated ``--set section.key=value``,
``--seed`` and ``--out-dir``.  Data directories use the layout written by
``gen-synth``: collection.tsv, queries.{train,dev,test}.tsv,
qrels.{train,dev,test}.tsv, triplets.tsv, triplets.distill.tsv, vocab.txt.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from types import SimpleNamespace

from . import data as io
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, Settings, dump_settings, load_settings
from .index import build_index, estimate_rflops, load_index, save_index, search
from .metrics import (
    mrr_at_k,
    ndcg_at_k,
    paired_t_test,
    per_query_mrr,
    per_query_ndcg,
    recall_at_k,
    skipped_ndcg,
    unjudged,
)
from .sparse import SpladeModel, format_sparse
from .synthetic import BM25, generate_synthetic_corpus, write_synthetic

SPLITS = ("train", "dev", "test")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--preset", default="desk", choices=("desk", "defaults"),
                   help="built-in settings applied before the config file (default: desk)")
    p.add_argument("--seed", type=int, help="random seed (overrides train.seed and synthetic.seed)")
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")


def _settings(args) -> Settings:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"synthetic.seed={args.seed}"]
    return load_settings(args.config, overrides, preset=args.preset)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- data loading -----------------------------------------------------------


def _load_dir(path, need_triplets: str | None = None):
    """Load a data directory; missing optional files are left empty."""
    root = Path(path)
    collection = io.load_collection(root / "collection.tsv")
    queries, qrels = {}, {}
    for split in SPLITS:
        q, r = root / f"queries.{split}.tsv", root / f"qrels.{split}.tsv"
        queries[split] = io.load_queries(q) if q.exists() else {}
        qrels[split] = io.load_qrels(r) if r.exists() else {}
    vocab = root / "vocab.txt"
    if vocab.exists():
        tok = io.Tokenizer.load(vocab)
    else:
        texts = list(collection.values()) + [t for s in queries.values() for t in s.values()]
        tok = io.Tokenizer.from_texts(texts)
    all_q = {k: v for s in queries.values() for k, v in s.items()}
    triplets = []
    if need_triplets:
        loader = io.load_teacher_triplets if need_triplets.endswith("distill.tsv") else io.load_triplets
        triplets = loader(root / need_triplets, all_q, collection)
    return SimpleNamespace(collection=collection, queries=queries, qrels=qrels, tokenizer=lambda: tok,
                           all_queries=lambda: all_q, triplets=triplets)


def _model_from_checkpoint(path):
    store, config, adapters, header = load_checkpoint(path)
    if header.get("kind", "splade") != "splade":
        raise ValueError(f"{path} is a {header.get('kind')} checkpoint, not a first-stage model")
    tok = io.Tokenizer(header["extra"]["vocab"]) if "vocab" in header.get("extra", {}) else None
    return SpladeModel(config, adapters, store), tok


# -- commands ---------------------------------------------------------------


def cmd_gen_synth(args, s: Settings) -> int:
    data = generate_synthetic_corpus(s.synthetic)
    out = write_synthetic(data, _out(args))
    bm25 = BM25(data.collection)
    for split in ("dev", "test"):
        run = bm25.search(data.queries[split], 10)
        print(f"bm25 {split} MRR@10\t{mrr_at_k(run, data.qrels[split], 10):.4f}")
    print(f"wrote {len(data.collection)} documents, {len(data.triplets)} triplets to {out}")
    return 0


def _train(args, s: Settings, mode: str) -> int:
    from .trainer import SpladeTrainer, build_model

    triplets = "triplets.distill.tsv" if mode == "distill" else "triplets.tsv"
    data = _load_dir(args.data, triplets)
    tok = data.tokenizer()
    enc = replace(s.encoder, vocab_size=len(tok))
    train = replace(s.train, mode=mode)
    model = build_model(enc, train, s.adapter if train.encoder_mode == "adapter-tune" else None)
    out = _out(args)
    (out / "settings.ini").write_text(dump_settings(s.replace("encoder", vocab_size=len(tok))))
    trainer = SpladeTrainer(model, tok, data.collection, data.all_queries(), train, s.regularizer)
    t0 = time.perf_counter()
    best = trainer.train(data.triplets, data.queries["dev"], data.qrels["dev"], out_dir=out)
    elapsed = time.perf_counter() - t0
    summary = {"best_step": best.step, "dev_mrr10": best.mrr, "checkpoint": best.path,
               "train_seconds": elapsed, "records": [asdict(r) for r in trainer.records]}
    if data.queries["test"]:
        run = _brute(trainer, data.queries["test"])
        summary["test_mrr10"] = mrr_at_k(run, data.qrels["test"], 10)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({k: v for k, v in summary.items() if k != "records"}))
    return 0


def _brute(trainer, queries):
    from .trainer import brute_force_run

    return brute_force_run(trainer.model, trainer.tokenizer, trainer.collection, queries, 10)


def cmd_train(args, s):
    return _train(args, s, "triplets")


def cmd_distill(args, s):
    return _train(args, s, "distill")


def cmd_index(args, s) -> int:
    from .trainer import encode_corpus

    model, tok = _model_from_checkpoint(args.checkpoint)
    collection = io.load_collection(args.collection)
    tok = tok or io.Tokenizer.from_texts(collection.values())
    docs = encode_corpus(model, tok, collection, "document")
    index = build_index(docs.items(), model.config.vocab_size, args.prune_below)
    out = _out(args)
    save_index(index, out / "index.bin")
    if args.write_vectors:
        with open(out / "doc_vectors.tsv", "w", encoding="utf-8") as fh:
            for d in sorted(docs):
                fh.write(format_sparse(d, docs[d]) + "\n")
    print(f"indexed {index.doc_count} documents, {index.nnz} postings -> {out / 'index.bin'}")
    return 0


def cmd_search(args, s) -> int:
    from .trainer import encode_corpus

    model, tok = _model_from_checkpoint(args.checkpoint)
    if tok is None:
        raise ValueError("checkpoint carries no vocabulary")
    index = load_index(args.index)
    queries = io.load_queries(args.queries)
    reps = encode_corpus(model, tok, queries, "query")
    run = {q: search(index, v, args.k, q).hits for q, v in reps.items()}
    path = _out(args) / args.run_name
    io.write_run(path, run)
    print(f"R-FLOPS\t{estimate_rflops(index, list(reps.values())):.6g}")
    print(f"wrote {len(run)} rankings to {path}")
    return 0


def _evaluate(run, qrels, k: int, depth: int) -> dict:
    return {f"MRR@{k}": mrr_at_k(run, qrels, k), f"NDCG@{k}": ndcg_at_k(run, qrels, k),
            f"R@{depth}": recall_at_k(run, qrels, depth)}


def cmd_evaluate(args, s) -> int:
    run = io.load_run(args.run)
    qrels = io.load_qrels(args.qrels)
    result = _evaluate(run, qrels, args.k, args.recall_depth)
    extra = unjudged(run, qrels)
    if extra:
        _log(f"warning: {len(extra)} run queries have no relevance judgements and are ignored")
    skipped = skipped_ndcg(qrels, args.k)
    if skipped:
        _log(f"note: NDCG skips {skipped} queries whose ideal DCG is 0")
    if args.baseline:
        base = io.load_run(args.baseline)
        result["baseline"] = _evaluate(base, qrels, args.k, args.recall_depth)
        result[f"p(MRR@{args.k})"] = paired_t_test(per_query_mrr(run, qrels, args.k),
                                                   per_query_mrr(base, qrels, args.k))
        result[f"p(NDCG@{args.k})"] = paired_t_test(per_query_ndcg(run, qrels, args.k),
                                                    per_query_ndcg(base, qrels, args.k))
    print(json.dumps(result, indent=2))
    return 0


def cmd_rerank(args, s) -> int:
    from .reranker import CrossEncoder, init_from_first_stage, rerank, train_reranker

    collection = io.load_collection(args.collection)
    queries = io.load_queries(args.queries)
    run = io.load_run(args.run)
    out = _out(args)
    if args.reranker:
        store, config, adapters, header = load_checkpoint(args.reranker)
        if header.get("kind") != "reranker":
            raise ValueError(f"{args.reranker} is not a reranker checkpoint")
        model = CrossEncoder(config, adapters, store)
        tok = io.Tokenizer(header["extra"]["vocab"])
    else:
        if not args.data:
            raise ValueError("training a reranker needs --data (or pass --reranker)")
        data = _load_dir(args.data, "triplets.tsv")
        tok = data.tokenizer()
        mode = args.mode or s.train.encoder_mode
        if args.init_from:
            model = init_from_first_stage(args.init_from, mode, seed=s.train.seed)
        else:
            enc = replace(s.encoder, vocab_size=len(tok))
            adapters = s.adapter if mode == "adapter-tune" else None
            model = CrossEncoder.create(enc, adapters, mode, seed=s.train.seed)
        dev_run = io.load_run(args.dev_run) if args.dev_run else None
        if dev_run is None:
            dev_run = BM25(data.collection).search(data.queries["dev"], args.depth)
        best = train_reranker(model, tok, data.collection, data.all_queries(), data.triplets,
                              s.train, dev_run, data.qrels["dev"], args.depth, out)
        print(json.dumps({"best_step": best.step, "dev_mrr10": best.mrr, "checkpoint": best.path}))
    reranked = rerank(run, args.depth, model.scorer(tok, collection, queries), collection)
    io.write_run(out / args.run_name, reranked, tag="rerank")
    print(f"wrote {len(reranked)} reranked lists to {out / args.run_name}")
    return 0


def cmd_ablate(args, s) -> int:
    from .trainer import ABLATION_COLUMNS, format_table, run_ablation_suite

    data = _load_dir(args.data, "triplets.tsv")
    enc = replace(s.encoder, vocab_size=len(data.tokenizer()))
    ks = [int(k) for k in args.ks.split(",")] if args.ks else None
    rows = run_ablation_suite(enc, s.adapter, s.train, data, ks, s.regularizer)
    out = _out(args)
    table = format_table(rows, ABLATION_COLUMNS)
    (out / "ablation.tsv").write_text(table)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    print(table, end="")
    return 0


def cmd_adapt(args, s) -> int:
    from .trainer import adapt_domain

    model, tok = _model_from_checkpoint(args.checkpoint)
    data = _load_dir(args.data)
    tok = tok or data.tokenizer()
    results, final = adapt_domain(model, tok, data, args.rounds, s.train, s.regularizer, args.epochs,
                                  args.depth, args.negatives, s.adapter, log=_log)
    out = _out(args)
    (out / "rounds.json").write_text(json.dumps([asdict(r) for r in results], indent=2))
    save_checkpoint(out / "adapted.ckpt", final.store, final.config, final.adapters,
                    extra={"vocab": tok.to_list()})
    print("round\ttest_mrr10\ttest_ndcg10\ttest_r100\tdev_mrr10")
    for r in results:
        print(f"{r.round}\t{r.test_mrr:.4f}\t{r.test_ndcg:.4f}\t{r.test_recall:.4f}\t{r.dev_mrr:.4f}")
    return 0


def cmd_rflops(args, s) -> int:
    from .trainer import encode_corpus

    model, tok = _model_from_checkpoint(args.checkpoint)
    index = load_index(args.index)
    reps = encode_corpus(model, tok, io.load_queries(args.queries), "query")
    print(f"{estimate_rflops(index, list(reps.values())):.10g}")
    return 0


def cmd_grad_check(args, s) -> int:
    from .trainer import objective_gradient_check

    seed = 0 if args.seed is None else args.seed
    err = objective_gradient_check(args.mode, seed=seed, step=args.step, samples=args.samples)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapter-splade",
                                     description="Adapter-tuned sparse retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        _common(p)
        p.set_defaults(func=fn)
        return p

    p = add("gen-synth", cmd_gen_synth, "write a seeded synthetic retrieval task")

    for name, fn, h in (("train", cmd_train, "contrastive training on triplets"),
                        ("distill", cmd_distill, "MarginMSE training on teacher-scored triplets")):
        p = add(name, fn, h)
        p.add_argument("--data", required=True, help="data directory")

    p = add("index", cmd_index, "encode a collection and write an inverted index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--prune-below", type=float, default=0.0)
    p.add_argument("--write-vectors", action="store_true", help="also write doc_vectors.tsv")

    p = add("search", cmd_search, "retrieve top-k for a query file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--run-name", default="run.tsv")

    p = add("evaluate", cmd_evaluate, "score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--recall-depth", type=int, default=1000)
    p.add_argument("--baseline", help="second run for a paired t-test")

    p = add("rerank", cmd_rerank, "rerank a run with a cross-encoder (training one if needed)")
    p.add_argument("--run", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--reranker", help="trained reranker checkpoint")
    p.add_argument("--init-from", help="first-stage checkpoint to initialise a new reranker")
    p.add_argument("--mode", choices=("finetune-all", "adapter-tune"))
    p.add_argument("--data", help="data directory with training triplets")
    p.add_argument("--dev-run", help="dev run used for checkpoint selection (default: BM25)")
    p.add_argument("--run-name", default="rerank.tsv")

    p = add("ablate", cmd_ablate, "adapter-layer ablation sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--ks", help="comma-separated k values (default: 0..num_layers)")

    p = add("adapt", cmd_adapt, "domain adaptation rounds with mined hard negatives")
    p.add_argument("--checkpoint", required=True, help="start model")
    p.add_argument("--data", required=True, help="target-domain data directory")
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--depth", type=int, default=30)
    p.add_argument("--negatives", type=int, default=4, help="negatives per training query")

    p = add("rflops", cmd_rflops, "R-FLOPS of a query set against an index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)

    p = add("grad-check", cmd_grad_check, "finite-difference check of the full objective")
    p.add_argument("--mode", choices=("triplets", "distill"), default="triplets")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _settings(args)
        return args.func(args, settings)
    except (ConfigError, io.DataFormatError, ValueError, KeyError, OSError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
