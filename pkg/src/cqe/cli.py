"""Command-line front end for the retrieval engine.

Subcommands mirror the experimental workflow: index-sparse, search-sparse,
search-dense, search-hybrid, rewrite, fuse-rrf, build-weak-labels,
train-toy, eval, compare, and an interactive converse REPL. Settings come
from a JSON config file (--config or the CQE_CONFIG environment variable)
with command-line flags taking precedence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

from .core import (
    RewriteConfig,
    TokenEmbeddingMatrix,
    decontextualize,
    load_sessions,
    load_token_matrices,
    pool,
    token_norm_report,
)
from .corpus import load_corpus, tokenize
from .dense import load_embeddings, search_dense
from .evaluation import ndcg, paired_t_test, read_qrels, read_run, recall_at, win_tie, write_run
from .fusion import FusionConfig, hybrid_combine, rrf
from .ranking import RankedList
from .sparse import BM25Config, build_index, load_index, save_index, search_sparse
from .trainer import (
    CosineTeacher,
    TableTeacher,
    ToyQueryEncoder,
    TrainConfig,
    build_weak_labels,
    load_weak_labels,
    save_weak_labels,
    train,
)

ENV_CONFIG = "CQE_CONFIG"


@dataclass
class EngineConfig:
    """Engine-wide paths and per-module defaults."""

    corpus: str | None = None
    sparse_index: str | None = None
    dense_store: str | None = None
    query_matrices: str | None = None
    qrels: str | None = None
    bm25: BM25Config = field(default_factory=BM25Config)
    rewrite: RewriteConfig = field(default_factory=RewriteConfig)
    hybrid_rewrite: RewriteConfig = field(
        default_factory=lambda: RewriteConfig(gamma=RewriteConfig.HYBRID_GAMMA)
    )
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_file(cls, path: str) -> EngineConfig:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        cfg = cls()
        paths = raw.get("paths", {})
        for name in ("corpus", "sparse_index", "dense_store", "query_matrices", "qrels"):
            if name in paths:
                setattr(cfg, name, paths[name])
        for name, dc_cls in (
            ("bm25", BM25Config),
            ("rewrite", RewriteConfig),
            ("hybrid_rewrite", RewriteConfig),
            ("fusion", FusionConfig),
            ("train", TrainConfig),
        ):
            if name in raw:
                overrides = raw[name]
                known = {f.name for f in fields(dc_cls)}
                unknown = set(overrides) - known
                if unknown:
                    raise ValueError(f"{path}: unknown {name} settings {sorted(unknown)}")
                setattr(cfg, name, dc_cls(**{**asdict(getattr(cfg, name)), **overrides}))
        return cfg


def _load_config(args) -> EngineConfig:
    path = getattr(args, "config", None) or os.environ.get(ENV_CONFIG)
    if path:
        if not os.path.exists(path):
            raise ValueError(f"config file {path!r} does not exist")
        return EngineConfig.from_file(path)
    return EngineConfig()


def _input_path(value: str | None, fallback: str | None, name: str) -> str:
    path = value or fallback
    if not path:
        raise ValueError(f"no {name} path given (flag or config)")
    if not os.path.exists(path):
        raise ValueError(f"{name} path {path!r} does not exist")
    return path


def _output_path(value: str | None, fallback: str | None, name: str) -> str:
    path = value or fallback
    if not path:
        raise ValueError(f"no {name} output path given")
    return path


def _load_text_queries(path: str) -> dict[str, str]:
    """Read {"qid", "text"} JSON-lines."""
    queries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                qid, text = obj["qid"], obj["text"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad query record: {exc}") from None
            if qid in queries:
                raise ValueError(f"{path}:{lineno}: duplicate qid {qid!r}")
            queries[qid] = text
    return queries


def _query_matrices(args, cfg: EngineConfig) -> dict[str, TokenEmbeddingMatrix]:
    """Token matrices either from a file or from an encoder over sessions."""
    if getattr(args, "encoder", None):
        encoder = ToyQueryEncoder.load(_input_path(args.encoder, None, "encoder"))
        sessions = load_sessions(_input_path(getattr(args, "sessions", None), None, "sessions"))
        matrices: dict[str, TokenEmbeddingMatrix] = {}
        for session in sessions:
            for i in range(len(session.turns)):
                context, query = session.tokens_for_turn(i)
                if not query:
                    continue
                matrices[session.qid(i)] = encoder.encode(context, query)
        return matrices
    path = _input_path(getattr(args, "matrices", None), cfg.query_matrices, "query matrices")
    return load_token_matrices(path)


def _hybrid_search(
    matrix: TokenEmbeddingMatrix,
    index,
    store,
    alpha: float,
    rewrite_cfg: RewriteConfig,
    depth: int,
) -> RankedList:
    dense_list = search_dense(store, pool(matrix), depth)
    bag = decontextualize(matrix, rewrite_cfg)
    sparse_list = search_sparse(index, bag, depth) if bag else RankedList([], tag="sparse")
    if not sparse_list:
        return RankedList(dense_list.entries, tag="hybrid")
    if not dense_list:
        return RankedList(sparse_list.entries, tag="hybrid")
    return hybrid_combine(sparse_list, dense_list, FusionConfig(alpha=alpha))


def _truncate(ranked: RankedList, k: int | None) -> RankedList:
    if k is None or len(ranked) <= k:
        return ranked
    return RankedList(ranked.entries[:k], ranked.tag)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_index_sparse(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(_input_path(args.corpus, cfg.corpus, "corpus"))
    bm25 = BM25Config(
        k1=args.k1 if args.k1 is not None else cfg.bm25.k1,
        b=args.b if args.b is not None else cfg.bm25.b,
    )
    index = build_index(corpus, bm25)
    out = _output_path(args.output, cfg.sparse_index, "index")
    save_index(index, out)
    print(f"indexed {index.doc_count} passages, {len(index.postings)} terms -> {out}")
    return 0


def _cmd_search_sparse(args) -> int:
    cfg = _load_config(args)
    index = load_index(_input_path(args.index, cfg.sparse_index, "index"))
    queries = _load_text_queries(_input_path(args.queries, None, "queries"))
    k = args.k if args.k is not None else 1000
    runs = {qid: search_sparse(index, tokenize(text), k) for qid, text in queries.items()}
    out = _output_path(args.output, None, "run")
    write_run(out, runs, tag=args.tag)
    print(f"wrote {sum(len(r) for r in runs.values())} results for {len(runs)} queries -> {out}")
    return 0


def _cmd_search_dense(args) -> int:
    cfg = _load_config(args)
    store = load_embeddings(_input_path(args.store, cfg.dense_store, "dense store"))
    matrices = _query_matrices(args, cfg)
    k = args.k if args.k is not None else 1000
    runs = {qid: search_dense(store, pool(m), k) for qid, m in matrices.items()}
    out = _output_path(args.output, None, "run")
    write_run(out, runs, tag=args.tag)
    print(f"wrote {sum(len(r) for r in runs.values())} results for {len(runs)} queries -> {out}")
    return 0


def _cmd_search_hybrid(args) -> int:
    cfg = _load_config(args)
    index = load_index(_input_path(args.index, cfg.sparse_index, "index"))
    store = load_embeddings(_input_path(args.store, cfg.dense_store, "dense store"))
    matrices = _query_matrices(args, cfg)
    alpha = args.alpha if args.alpha is not None else cfg.fusion.alpha
    gamma = args.gamma if args.gamma is not None else cfg.hybrid_rewrite.gamma
    rewrite_cfg = RewriteConfig(gamma=gamma, exclude_special_tokens=cfg.hybrid_rewrite.exclude_special_tokens)
    k = args.k if args.k is not None else 1000
    runs = {
        qid: _truncate(_hybrid_search(m, index, store, alpha, rewrite_cfg, args.depth), k)
        for qid, m in matrices.items()
    }
    out = _output_path(args.output, None, "run")
    write_run(out, runs, tag=args.tag)
    print(f"wrote {sum(len(r) for r in runs.values())} results for {len(runs)} queries -> {out}")
    return 0


def _cmd_rewrite(args) -> int:
    cfg = _load_config(args)
    matrices = _query_matrices(args, cfg)
    gamma = args.gamma if args.gamma is not None else cfg.rewrite.gamma
    rewrite_cfg = RewriteConfig(gamma=gamma, exclude_special_tokens=cfg.rewrite.exclude_special_tokens)
    out = _output_path(args.output, None, "rewrites")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for qid, matrix in matrices.items():
            bag = decontextualize(matrix, rewrite_cfg)
            fh.write(json.dumps({"qid": qid, "text": " ".join(bag)}, ensure_ascii=False))
            fh.write("\n")
    print(f"rewrote {len(matrices)} queries (gamma={gamma}) -> {out}")
    return 0


def _cmd_fuse_rrf(args) -> int:
    cfg = _load_config(args)
    run_files = [read_run(_input_path(p, None, "run")) for p in args.runs]
    config = FusionConfig(rrf_k=args.rrf_k if args.rrf_k is not None else cfg.fusion.rrf_k)
    qids = sorted({qid for run in run_files for qid in run})
    k = args.k
    fused = {}
    for qid in qids:
        lists = [run[qid] for run in run_files if qid in run]
        fused[qid] = _truncate(rrf(lists, config), k)
    out = _output_path(args.output, None, "run")
    write_run(out, fused, tag=args.tag)
    print(f"fused {len(run_files)} runs over {len(qids)} queries -> {out}")
    return 0


def _cmd_build_weak_labels(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(_input_path(args.corpus, cfg.corpus, "corpus"))
    index = load_index(_input_path(args.index, cfg.sparse_index, "index"))
    sessions = load_sessions(_input_path(args.sessions, None, "sessions"))
    if args.teacher_scores:
        teacher = TableTeacher.from_file(_input_path(args.teacher_scores, None, "teacher scores"))
    else:
        store = load_embeddings(_input_path(args.store, cfg.dense_store, "dense store"))
        teacher = CosineTeacher(store)
    labels = build_weak_labels(
        corpus, sessions, index, teacher, candidate_depth=args.depth, pool_size=args.pool_size
    )
    out = _output_path(args.output, None, "labels")
    save_weak_labels(labels, out)
    print(f"labeled {len(labels)} turns -> {out}")
    return 0


def _cmd_train_toy(args) -> int:
    cfg = _load_config(args)
    labels = load_weak_labels(_input_path(args.labels, None, "labels"))
    sessions = load_sessions(_input_path(args.sessions, None, "sessions"))
    corpus = load_corpus(_input_path(args.corpus, cfg.corpus, "corpus"))
    store = load_embeddings(_input_path(args.store, cfg.dense_store, "dense store"))

    base = cfg.train
    train_cfg = TrainConfig(
        tau=args.tau if args.tau is not None else base.tau,
        learning_rate=args.learning_rate if args.learning_rate is not None else base.learning_rate,
        batch_size=args.batch_size if args.batch_size is not None else base.batch_size,
        steps=args.steps if args.steps is not None else base.steps,
        seed=args.seed if args.seed is not None else base.seed,
        use_hard_negatives=args.hard_negatives or base.use_hard_negatives,
        use_soft_labels=args.soft_labels or base.use_soft_labels,
    )
    vocab_tokens = [
        tok
        for session in sessions
        for turn in session.turns
        for tok in tokenize(turn.raw_utterance)
    ]
    encoder = ToyQueryEncoder.create(vocab_tokens, dim=store.dim, seed=train_cfg.seed)
    teacher = CosineTeacher(store) if train_cfg.use_soft_labels else None
    result = train(encoder, labels, sessions, store, train_cfg, teacher=teacher, corpus=corpus)
    out = _output_path(args.output, None, "encoder checkpoint")
    result.encoder.save(out)
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(
        f"trained {train_cfg.steps} steps (batch {train_cfg.batch_size}, "
        f"lr {train_cfg.learning_rate}): loss {first:.4f} -> {last:.4f}; saved {out}"
    )
    return 0


_METRICS = ("ndcg", "ndcg@3", "recall")


def _evaluate(run_path: str, qrels_path: str, metric: str, cutoff: int | None, min_grade: int):
    run = read_run(run_path)
    qrels = read_qrels(qrels_path)
    if metric == "ndcg":
        report = ndcg(run, qrels, cutoff or 1000)
        label = "nDCG" if cutoff is None else f"nDCG@{cutoff}"
    elif metric == "ndcg@3":
        report = ndcg(run, qrels, 3)
        label = "nDCG@3"
    elif metric == "recall":
        c = cutoff or 1000
        report = recall_at(run, qrels, cutoff=c, min_grade=min_grade)
        label = f"recall@{c}"
    else:
        raise ValueError(f"unknown metric {metric!r} (choose from {', '.join(_METRICS)})")
    return report, label


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    qrels_path = _input_path(args.qrels, cfg.qrels, "qrels")
    run_path = _input_path(args.run, None, "run")
    report, label = _evaluate(run_path, qrels_path, args.metric, args.cutoff, args.min_grade)
    if args.per_query:
        for qid in sorted(report.per_query):
            print(f"{qid} {report.per_query[qid]:.4f}")
    print(f"evaluated queries: {len(report.per_query)}")
    print(f"mean {label} {report.mean:.3f}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _load_config(args)
    qrels_path = _input_path(args.qrels, cfg.qrels, "qrels")
    system, label = _evaluate(
        _input_path(args.run, None, "run"), qrels_path, args.metric, args.cutoff, args.min_grade
    )
    baseline, _ = _evaluate(
        _input_path(args.baseline, None, "baseline run"),
        qrels_path,
        args.metric,
        args.cutoff,
        args.min_grade,
    )
    wins, ties = win_tie(system, baseline)
    qids = sorted(system.per_query)
    t, p = paired_t_test(
        [system.per_query[q] for q in qids], [baseline.per_query[q] for q in qids]
    )
    print(f"metric: {label} over {len(qids)} queries")
    print(f"system mean {system.mean:.3f} baseline mean {baseline.mean:.3f}")
    print(f"wins {wins} ties {ties} losses {len(qids) - wins - ties}")
    print(f"t = {t:.4f} p = {p:.6g}")
    return 0


def _cmd_converse(args) -> int:
    cfg = _load_config(args)
    index = load_index(_input_path(args.index, cfg.sparse_index, "index"))
    store = load_embeddings(_input_path(args.store, cfg.dense_store, "dense store"))
    encoder = None
    matrices = None
    if args.encoder:
        encoder = ToyQueryEncoder.load(_input_path(args.encoder, None, "encoder"))
    else:
        matrices = load_token_matrices(
            _input_path(args.matrices, cfg.query_matrices, "query matrices")
        )
    alpha = args.alpha if args.alpha is not None else cfg.fusion.alpha
    gamma = args.gamma if args.gamma is not None else cfg.hybrid_rewrite.gamma
    rewrite_cfg = RewriteConfig(gamma=gamma, exclude_special_tokens=cfg.hybrid_rewrite.exclude_special_tokens)

    history: list[str] = []
    for line in sys.stdin:
        utterance = line.strip()
        if not utterance:
            continue
        if utterance == "exit":
            break
        if utterance == "reset":
            history.clear()
            print("context cleared")
            continue
        context = [tok for past in history for tok in tokenize(past)]
        query = tokenize(utterance)
        if not query:
            print("no query tokens; ignored")
            continue
        turn_number = len(history) + 1
        if encoder is not None:
            matrix = encoder.encode(context, query)
        else:
            qid = f"{args.qid_prefix}{turn_number}"
            if qid not in matrices:
                raise ValueError(f"no token matrix for turn {qid!r}")
            matrix = matrices[qid]
        history.append(utterance)

        print(f"turn {turn_number} ({len(context)} context tokens)")
        bag = decontextualize(matrix, rewrite_cfg)
        print(f"rewrite: {' '.join(bag)}")
        print("token norms (l2, normalized by context mean):")
        for row, is_context in zip(
            token_norm_report(matrix),
            [True] * matrix.context_len + [False] * matrix.query_len,
        ):
            kind = "context" if is_context else "query"
            normalized = f"{row.normalized_norm:.4f}" if row.normalized_norm is not None else "-"
            print(f"  [{kind}] {row.token} {row.l2_norm:.4f} {normalized}")
        results = _truncate(
            _hybrid_search(matrix, index, store, alpha, rewrite_cfg, args.depth),
            args.k if args.k is not None else 10,
        )
        print("results:")
        for e in results:
            print(f"  {e.rank}. {e.docid} {e.score:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (or ${ENV_CONFIG})")
    common.add_argument("--seed", type=int, help="random seed override")
    common.add_argument("--k", type=int, help="result depth (default 1000; 10 for converse)")
    common.add_argument("--output", help="output file path")

    parser = argparse.ArgumentParser(prog="cqe", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("index-sparse", parents=[common], help="build and save the inverted index")
    p.add_argument("--corpus")
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.set_defaults(func=_cmd_index_sparse)

    p = sub.add_parser("search-sparse", parents=[common], help="BM25 retrieval for text queries")
    p.add_argument("--index")
    p.add_argument("--queries", help='JSON-lines {"qid", "text"}')
    p.add_argument("--tag", default="sparse")
    p.set_defaults(func=_cmd_search_sparse)

    for name, help_text, func in (
        ("search-dense", "inner-product retrieval for query matrices", _cmd_search_dense),
        ("search-hybrid", "combined sparse+dense retrieval", _cmd_search_hybrid),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--store")
        p.add_argument("--matrices", help="token-matrix JSON-lines file")
        p.add_argument("--encoder", help="toy encoder checkpoint manifest")
        p.add_argument("--sessions", help="sessions file (with --encoder)")
        p.add_argument("--tag", default=name.split("-", 1)[1])
        if name == "search-hybrid":
            p.add_argument("--index")
            p.add_argument("--alpha", type=float)
            p.add_argument("--gamma", type=float)
            p.add_argument("--depth", type=int, default=1000)
        p.set_defaults(func=func)

    p = sub.add_parser("rewrite", parents=[common], help="emit decontextualized text queries")
    p.add_argument("--matrices")
    p.add_argument("--encoder")
    p.add_argument("--sessions")
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=_cmd_rewrite)

    p = sub.add_parser("fuse-rrf", parents=[common], help="reciprocal rank fusion of run files")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--rrf-k", type=float, dest="rrf_k")
    p.add_argument("--tag", default="rrf")
    p.set_defaults(func=_cmd_fuse_rrf)

    p = sub.add_parser("build-weak-labels", parents=[common], help="pseudo-label session turns")
    p.add_argument("--corpus")
    p.add_argument("--index")
    p.add_argument("--store")
    p.add_argument("--sessions")
    p.add_argument("--teacher-scores", dest="teacher_scores", help="file-backed teacher table")
    p.add_argument("--depth", type=int, default=1000)
    p.add_argument("--pool-size", type=int, default=200, dest="pool_size")
    p.set_defaults(func=_cmd_build_weak_labels)

    p = sub.add_parser("train-toy", parents=[common], help="train the toy query encoder")
    p.add_argument("--labels")
    p.add_argument("--sessions")
    p.add_argument("--corpus")
    p.add_argument("--store")
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--tau", type=float)
    p.add_argument("--hard-negatives", action="store_true", dest="hard_negatives")
    p.add_argument("--soft-labels", action="store_true", dest="soft_labels")
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("eval", parents=[common], help="score a run file against qrels")
    p.add_argument("--run")
    p.add_argument("--qrels")
    p.add_argument("--metric", choices=_METRICS, default="ndcg")
    p.add_argument("--cutoff", type=int)
    p.add_argument("--min-grade", type=int, default=2, dest="min_grade")
    p.add_argument("--per-query", action="store_true", dest="per_query")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="win/tie counts and paired t-test")
    p.add_argument("--run")
    p.add_argument("--baseline")
    p.add_argument("--qrels")
    p.add_argument("--metric", choices=_METRICS, default="ndcg@3")
    p.add_argument("--cutoff", type=int)
    p.add_argument("--min-grade", type=int, default=2, dest="min_grade")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("converse", parents=[common], help="interactive multi-turn retrieval")
    p.add_argument("--index")
    p.add_argument("--store")
    p.add_argument("--encoder")
    p.add_argument("--matrices")
    p.add_argument("--qid-prefix", default="turn_", dest="qid_prefix")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--depth", type=int, default=1000)
    p.set_defaults(func=_cmd_converse)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
