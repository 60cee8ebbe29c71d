"""Command-line entry point: one subcommand per pipeline stage, plus ``demo``.

Stages talk only through files. Every artifact header carries the digest of
the configuration that produced it, and a stage refuses inputs made under a
different configuration unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, check_digest
from .dataset import EmptyClassError, build_ce, build_margin, dataset_header, load_ce, load_margin, save_ce, save_margin
from .dig import CollectStats, TripletWriter, collect, read_triplets
from .inference import em_summary, predict
from .lm_gateway import ConfidenceProvider, GatewayError, HttpLM, MockLM
from .pipeline import METHODS, collect_params, rank_for_method, text_lookup, with_seed
from .records import read_jsonl, read_queries, write_jsonl
from .retrieval import BM25Retriever, Corpus, load_index, save_index
from .scorer import ScorerModel
from .trainer import TrainingDiverged, train
from .world import generate, load_categories, mock_spec_to_dict

logger = logging.getLogger(__name__)


def make_provider(cfg: RunConfig) -> ConfidenceProvider:
    if cfg.provider.kind == "http":
        return HttpLM(cfg.provider.http)
    return MockLM(cfg.provider.mock)


# -- stages ------------------------------------------------------------------


def stage_index(cfg: RunConfig, corpus_path: str | Path, out: str | Path) -> Corpus:
    corpus = Corpus.from_jsonl(corpus_path)
    save_index(corpus, out, {"config_digest": cfg.stage_digest("index"), "documents": len(corpus)})
    return corpus


def open_index(cfg: RunConfig, path: str | Path, force: bool = False) -> tuple[Corpus, BM25Retriever]:
    corpus, header = load_index(path)
    check_digest(header, cfg.stage_digest("index"), f"index {path}", force)
    return corpus, BM25Retriever(corpus, cfg.retrieval.k1, cfg.retrieval.b)


def stage_collect(
    cfg: RunConfig,
    index_path: str | Path,
    queries_path: str | Path,
    out: str | Path,
    provider: ConfidenceProvider | None = None,
    force: bool = False,
) -> CollectStats:
    corpus, retriever = open_index(cfg, index_path, force)
    queries = read_queries(queries_path)
    provider = provider or make_provider(cfg)
    digest = cfg.stage_digest("collect")
    writer = TripletWriter(out, {"config_digest": digest, "model_id": provider.model_id})
    check_digest(writer.header, digest, f"triplet file {out}", force)
    stats = CollectStats()
    writer.write(collect(queries, corpus, retriever, provider, collect_params(cfg), writer.existing, stats))
    return stats


def stage_build_dataset(
    cfg: RunConfig,
    triplets_path: str | Path,
    out_dir: str | Path,
    queries_path: str | Path | None = None,
    force: bool = False,
) -> tuple[int, int]:
    header, triplets = read_triplets(triplets_path)
    check_digest(header, cfg.stage_digest("collect"), f"triplet file {triplets_path}", force)
    if queries_path is not None:
        keep = {q.id for q in read_queries(queries_path)}
        triplets = [t for t in triplets if t.query_id in keep]
    loss, ds = cfg.train.loss, cfg.dataset
    ce = build_ce(triplets, loss.b1, loss.b2, ds.seed)
    margin = build_margin(triplets, loss.b1, loss.b2, ds.band, ds.seed, ds.negative_ratio)
    head = dataset_header(
        loss.b1, loss.b2, ds.band, ds.seed, header.get("model_id", ""),
        config_digest=cfg.stage_digest("dataset"), triplets=len(triplets),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ce(out / "ce.jsonl", ce, head)
    save_margin(out / "margin.jsonl", margin, head)
    return len(ce), len(margin)


def stage_train(
    cfg: RunConfig,
    ce_path: str | Path,
    margin_path: str | Path,
    index_path: str | Path,
    queries_path: str | Path,
    out: str | Path,
    log_path: str | Path | None = None,
    force: bool = False,
) -> ScorerModel:
    digest = cfg.stage_digest("dataset")
    h_ce, ce = load_ce(ce_path)
    h_m, margin = load_margin(margin_path)
    check_digest(h_ce, digest, f"CE set {ce_path}", force)
    check_digest(h_m, digest, f"margin set {margin_path}", force)
    corpus, _ = open_index(cfg, index_path, force)
    texts = text_lookup(read_queries(queries_path), corpus)
    model = ScorerModel.init(cfg.model.features, cfg.model.hidden, cfg.model.seed)
    result = train(model, ce, margin, cfg.train, texts)
    result.model.meta = {"config_digest": cfg.stage_digest("train")}
    result.model.save(out)
    if log_path is not None:
        result.write_log(log_path)
    return result.model


def stage_rerank(
    cfg: RunConfig,
    method: str,
    index_path: str | Path,
    queries_path: str | Path,
    out: str | Path,
    model_path: str | Path | None = None,
    categories_path: str | Path | None = None,
    seed: int = 0,
    provider: ConfidenceProvider | None = None,
    force: bool = False,
) -> dict:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    corpus, retriever = open_index(cfg, index_path, force)
    queries = read_queries(queries_path)
    provider = provider or make_provider(cfg)
    model = None
    if method in ("infogain", "unfiltered"):
        if model_path is None:
            raise ValueError(f"method {method!r} needs --model")
        model = ScorerModel.load(model_path)
        check_digest(model.meta, cfg.stage_digest("train"), f"model {model_path}", force)
    categories = None
    if method == "ideal":
        if categories_path is None:
            raise ValueError("method 'ideal' needs --categories")
        categories = load_categories(categories_path)
    texts = {d: doc.full_text for d, doc in corpus.documents.items()}
    records = []
    for q in queries:
        cand = [r.doc_id for r in retriever.search(q.question, cfg.collect.top_k)]
        ranked = rank_for_method(method, q, cand, texts, cfg.inference, model, seed, categories)
        pred = predict(q.id, q.question, q.answers, ranked, texts, provider, cfg.inference)
        records.append({
            **pred.to_dict(),
            "gold": list(q.answers),
            "ranked": [
                {"doc_id": r.doc_id, "prob": None if r.prob != r.prob else r.prob,
                 "passed_filter": r.passed_filter, "final_rank": r.final_rank}
                for r in ranked
            ],
        })
    header = {"config_digest": cfg.stage_digest("rerank"), "method": method, "seed": seed,
              "model_id": provider.model_id}
    write_jsonl(out, records, header)
    return em_summary(records)


def evaluate_file(path: str | Path) -> dict:
    header, records = read_jsonl(path)
    for i, rec in enumerate(records, 1):
        if "em" not in rec:
            raise ValueError(f"{path}: prediction record {i} has no 'em' field")
    return {"method": header.get("method", Path(path).stem), **em_summary(records)}


def format_em(summary: dict) -> str:
    return (f"EM {summary['em']:.1f}% ({summary['correct']}/{summary['scored']} correct, "
            f"{summary['skipped']} skipped)")


def results_table(rows: Sequence[dict]) -> str:
    lines = [f"{'method':<12} {'EM':>7} {'correct':>8} {'scored':>7} {'skipped':>8}"]
    for r in rows:
        lines.append(f"{r['method']:<12} {r['em']:>6.1f}% {r['correct']:>8} {r['scored']:>7} {r['skipped']:>8}")
    return "\n".join(lines)


def run_demo(cfg: RunConfig, seed: int, out_dir: str | Path, methods: Sequence[str] = METHODS) -> list[dict]:
    """Generate a world and run every stage through files under ``out_dir``."""
    out = Path(out_dir)
    cfg = with_seed(cfg, seed)
    world = generate(cfg.world)
    paths = world.write(out / "world")
    mock = replace(world.mock_spec(), **{
        k: v for k, v in mock_spec_to_dict(cfg.provider.mock).items()
        if k not in ("knowledge", "contradiction_marker")
    })
    cfg = replace(cfg, provider=replace(cfg.provider, kind="mock", mock=mock))
    cfg.save(out / "config.json")

    stage_index(cfg, paths["corpus"], out / "index.json")
    stage_collect(cfg, out / "index.json", paths["queries"], out / "triplets.jsonl")
    stage_build_dataset(cfg, out / "triplets.jsonl", out / "dataset", paths["queries_train"])
    stage_train(cfg, out / "dataset" / "ce.jsonl", out / "dataset" / "margin.jsonl", out / "index.json",
                paths["queries"], out / "model.json", out / "train_log.jsonl")
    rows = []
    for m in methods:
        pred_path = out / f"predictions_{m}.jsonl"
        stage_rerank(cfg, m, out / "index.json", paths["queries_test"], pred_path, out / "model.json",
                     paths["categories"], seed)
        rows.append(evaluate_file(pred_path))
    (out / "results.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return rows


# -- argument handling -------------------------------------------------------


def _cmd_generate_world(args, cfg: RunConfig) -> int:
    spec = cfg.world if args.seed is None else replace(cfg.world, seed=args.seed)
    paths = generate(spec).write(args.out)
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return 0


def _cmd_index(args, cfg: RunConfig) -> int:
    corpus = stage_index(cfg, args.corpus, args.out)
    print(f"indexed {len(corpus)} documents -> {args.out}")
    return 0


def _cmd_search(args, cfg: RunConfig) -> int:
    _, retriever = open_index(cfg, args.index, args.force)
    for r in retriever.search(args.query, args.top_k):
        print(f"{r.rank}\t{r.doc_id}\t{r.score:.6f}")
    return 0


def _cmd_collect(args, cfg: RunConfig) -> int:
    st = stage_collect(cfg, args.index, args.queries, args.out, force=args.force)
    print(f"queries {st.queries} (skipped {st.skipped_queries}), triplets written {st.triplets}, "
          f"resumed {st.resumed}, failed {st.failed}, provider calls {st.baseline_calls} + {st.augmented_calls}")
    return 0


def _cmd_build_dataset(args, cfg: RunConfig) -> int:
    n_ce, n_m = stage_build_dataset(cfg, args.triplets, args.out_dir, args.queries, args.force)
    print(f"CE pairs {n_ce}, margin groups {n_m} -> {args.out_dir}")
    return 0


def _cmd_train(args, cfg: RunConfig) -> int:
    stage_train(cfg, args.ce, args.margin, args.index, args.queries, args.out, args.log, args.force)
    print(f"model -> {args.out}")
    return 0


def _cmd_rerank(args, cfg: RunConfig) -> int:
    s = stage_rerank(cfg, args.method, args.index, args.queries, args.out, args.model, args.categories,
                     args.seed, force=args.force)
    print(f"{args.method}: {format_em(s)} -> {args.out}")
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    rows = [evaluate_file(p) for p in args.predictions]
    if len(rows) == 1:
        print(format_em(rows[0]))
    else:
        print(results_table(rows))
    return 0


def _cmd_demo(args, cfg: RunConfig) -> int:
    rows = run_demo(cfg, args.seed, args.out)
    print(results_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--force", action="store_true", help="accept inputs made under a different config digest")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="digrank", description="Information-gain document reranking pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-world", parents=[common], help="write a synthetic corpus, queries and category map")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override world.seed")
    p.set_defaults(func=_cmd_generate_world)

    p = sub.add_parser("index", parents=[common], help="build a BM25 index from a corpus JSONL")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="index JSON path")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("search", parents=[common], help="query a BM25 index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("collect", parents=[common], help="score (query, doc) pairs into dig triplets (resumable)")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="triplet JSONL; appended to when it exists")
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("build-dataset", parents=[common], help="derive CE pairs and margin groups from triplets")
    p.add_argument("--triplets", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--queries", help="restrict to the queries in this JSONL (e.g. the training split)")
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("train", parents=[common], help="train the scorer")
    p.add_argument("--ce", required=True)
    p.add_argument("--margin", required=True)
    p.add_argument("--index", required=True, help="index holding the document texts")
    p.add_argument("--queries", required=True, help="queries JSONL holding the question texts")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--log", help="per-step loss log (JSONL)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("rerank", parents=[common], help="select documents, answer once per query, write predictions")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.add_argument("--method", choices=METHODS, default="infogain")
    p.add_argument("--model", help="trained model (infogain, unfiltered)")
    p.add_argument("--categories", help="planted category map (ideal)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed for the random method")
    p.set_defaults(func=_cmd_rerank)

    p = sub.add_parser("eval", parents=[common], help="exact-match accuracy of prediction files")
    p.add_argument("predictions", nargs="+")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("demo", parents=[common], help="run every stage on a synthetic world and print an EM table")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="demo_out", help="artifact directory")
    p.set_defaults(func=_cmd_demo)
    return parser


def _one_line(exc: BaseException) -> str:
    if isinstance(exc, KeyError):
        return f"missing field {exc}"
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except (ConfigError, GatewayError, TrainingDiverged, EmptyClassError, ValueError, KeyError, OSError) as exc:
        print(f"digrank: error: {_one_line(exc)}", file=sys.stderr)
        return 1


__all__ = [
    "build_parser", "evaluate_file", "main", "make_provider", "results_table", "run_demo",
    "stage_build_dataset", "stage_collect", "stage_index", "stage_rerank", "stage_train",
]
