"""``tacindex`` command line: synth, stats, cluster, build, search, eval, bench.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
(keys are the long option names, dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tac
from .corpus import (
    load_corpus,
    load_qrels,
    load_queries,
    read_run,
    require_same_dim,
    save_corpus,
    save_queries,
    token_histogram,
    top_k_share,
    write_qrels,
    write_run,
)
from .engine import SearchParams, exhaustive_maxsim, search
from .errors import TacIndexError, UsageError
from .index import Index, build_index
from .metrics import evaluate, parse_metric
from .pq import build_distance_tables, build_naive_tables, residual_scores, residual_scores_naive
from .synth import SynthConfig, generate

logger = logging.getLogger("tacindex")

GRID_KAPPA_C = (15, 20, 40, 80, 100, 120)
GRID_KAPPA_D = (250, 500, 1000, 2000, 4000)
GRID_ALPHA = (0.35, 0.4, 0.45, 0.5)
TIMING_FIELDS = (
    "query_id", "gather_us", "prune_us", "refine_us", "total_us",
    "candidates_after_gather", "candidates_after_prune",
)


# ---------------------------------------------------------------------------
# config handling


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, path) -> None:
    """Turn config entries into parser defaults, converting with each option's own type."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in read_config(path).items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for this command")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError as exc:
                raise UsageError(f"config {key}: {exc}") from exc
        else:
            defaults[key] = raw
    sub.set_defaults(**defaults)


def echo_config(args: argparse.Namespace, out=None) -> None:
    out = out or sys.stdout
    items = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    print("# effective config", file=out)
    for key in sorted(items):
        value = items[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        print(f"{key} = {value}", file=out)


def _threads(args) -> int:
    n = args.threads
    if n is None or n == 0:
        return os.cpu_count() or 1
    if n < 0:
        raise UsageError("--threads must be >= 0")
    return n


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_docs=args.n_docs, vocab_size=args.vocab_size, dim=args.dim, zipf_s=args.zipf_s,
        doc_len_min=args.doc_len_min, doc_len_max=args.doc_len_max, max_senses=args.max_senses,
        noise_min=args.noise_min, noise_max=args.noise_max, topic_weight=args.topic_weight,
        n_queries=args.n_queries, query_len_min=args.query_len_min, query_len_max=args.query_len_max,
        query_noise=args.query_noise, seed=args.seed,
    )
    corpus, queries, qrels = generate(cfg)
    out = Path(args.out)
    save_corpus(corpus, out / "corpus")
    save_queries(queries, out / "queries")
    write_qrels(out / "qrels.tsv", qrels)
    print(f"wrote {corpus.n_docs} docs, {corpus.n_vectors} vectors, {len(queries)} queries to {out}")
    return 0


def cmd_stats(args) -> int:
    corpus = load_corpus(args.corpus)
    hist = token_histogram(corpus)
    print(f"vectors = {corpus.n_vectors}")
    print(f"documents = {corpus.n_docs}")
    print(f"distinct_tokens = {len(hist)}")
    print(f"top{args.top_k}_share = {top_k_share(hist, args.top_k):.4f}")
    print("rank\ttoken\tcount\tcumulative_share")
    acc = 0
    for rank, (tok, n) in enumerate(sorted(hist.items(), key=lambda kv: (-kv[1], kv[0]))[: args.show], 1):
        acc += n
        print(f"{rank}\t{tok}\t{n}\t{acc / corpus.n_vectors:.4f}")
    return 0


def _check_cluster_args(args) -> None:
    if args.kappa < 1 or args.iterations < 1:
        raise UsageError("--kappa and --iterations must be >= 1")
    if args.mu > args.tau:
        raise UsageError(f"--mu ({args.mu}) must not exceed --tau ({args.tau})")
    if args.epsilon < 1 or args.theta < 1:
        raise UsageError("--epsilon and --theta must be >= 1")
    if args.sample_cap < 1 or args.train_factor < 1:
        raise UsageError("--sample-cap and --train-factor must be >= 1")


def cmd_cluster(args) -> int:
    threads = _threads(args)
    _check_cluster_args(args)
    corpus = load_corpus(args.corpus, renormalize=args.renormalize)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    stats = tac.compute_token_stats(corpus, args.sample_cap, args.seed)
    plan = tac.allocate(stats, args.kappa, args.mu, args.tau, args.epsilon, args.theta)
    bound = tac.speedup_lower_bound(stats)
    t1 = time.perf_counter()
    codebook = tac.train(corpus, plan, args.iterations, args.seed, threads, args.train_factor)
    t2 = time.perf_counter()
    assignment = tac.assign(corpus, codebook, threads)
    t3 = time.perf_counter()
    codebook.save(out / "codebook.bin")
    assignment.save(out / "assignment.bin")
    report = plan.report(bound)
    (out / "plan.txt").write_text(report + "\n", encoding="utf-8")

    tac_ops = codebook.info["distance_ops"] + assignment.distance_ops
    print(f"# clustering kappa={args.kappa} iterations={args.iterations} vectors={corpus.n_vectors}")
    print(report)
    print(f"stats_seconds = {t1 - t0:.3f}")
    print(f"train_seconds = {t2 - t1:.3f}")
    print(f"assign_seconds = {t3 - t2:.3f}")
    print(f"tac_seconds = {t3 - t1:.3f}")
    print(f"tac_distance_ops = {tac_ops}")
    print(f"inertia = {assignment.inertia():.6f}")
    if args.baseline:
        b0 = time.perf_counter()
        res = tac.baseline_kmeans(corpus.vectors, plan.total, args.iterations, args.seed, args.train_factor)
        base_asg = tac.baseline_assign(corpus.vectors, res.centroids)
        b1 = time.perf_counter()
        base_ops = res.distance_ops + base_asg.distance_ops
        print(f"baseline_seconds = {b1 - b0:.3f}")
        print(f"baseline_distance_ops = {base_ops}")
        print(f"baseline_inertia = {base_asg.inertia():.6f}")
        print(f"measured_op_ratio = {base_ops / tac_ops:.4f}")
        print(f"speedup_lower_bound = {bound:.4f}")
    return 0


def cmd_build(args) -> int:
    if args.pq_m < 1 or not 1 <= args.pq_bits <= 8:
        raise UsageError("--pq-m must be >= 1 and --pq-bits in 1..8")
    if args.graph_m < 2 or args.ef_construction < 1:
        raise UsageError("--graph-m must be >= 2 and --ef-construction >= 1")
    corpus = load_corpus(args.corpus, renormalize=args.renormalize)
    clusters = Path(args.clusters)
    codebook = tac.TokenPartitionedCodebook.load(clusters / "codebook.bin")
    assignment = tac.Assignment.load(clusters / "assignment.bin")
    if assignment.centroid_ids.size != corpus.n_vectors:
        raise UsageError(f"assignment covers {assignment.centroid_ids.size} vectors, corpus has {corpus.n_vectors}")
    t0 = time.perf_counter()
    index = build_index(
        corpus, codebook, assignment,
        pq_m=args.pq_m, pq_bits=args.pq_bits, pq_iterations=args.pq_iterations, pq_sample=args.pq_sample,
        graph_m=args.graph_m, ef_construction=args.ef_construction, seed=args.seed,
    )
    index.save(args.index)
    print(f"build_seconds = {time.perf_counter() - t0:.3f}")
    for key, value in index.size_report().items():
        print(f"{key} = {value}")
    return 0


def _params(args) -> SearchParams:
    return SearchParams(args.kappa_c, args.kappa_d, args.alpha, args.ef_search, args.k)


def _run_queries(index, queries, params, threads):
    def one(item):
        qid, q = item
        return qid, search(q, index, params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, queries))
    return [one(item) for item in queries]


def _write_timings(path, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_FIELDS)
        for qid, r in results:
            t = r.timings_us
            w.writerow([qid, f"{t['gather_us']:.1f}", f"{t['prune_us']:.1f}", f"{t['refine_us']:.1f}",
                        f"{t['total_us']:.1f}", r.n_gathered, r.n_pruned])


def _rankings(index, results):
    for qid, r in results:
        yield qid, [(index.external_id(int(d)), float(s)) for d, s in zip(r.doc_ids, r.scores)]


def cmd_search(args) -> int:
    threads = _threads(args)
    params = _params(args)
    if args.grid:
        cells = [SearchParams(kappa_c=kc, kappa_d=kd, alpha=a, k=args.k)
                 for kd, a, kc in itertools.product(args.grid_kappa_d, args.grid_alpha, args.grid_kappa_c)]
    if args.oracle and not args.corpus:
        raise UsageError("--oracle needs --corpus")
    index = Index.load(args.index)
    queries = load_queries(args.queries, max_tokens=args.max_query_tokens)
    if queries.dim != index.codebook.dim:
        raise UsageError(f"query dim {queries.dim} != index dim {index.codebook.dim}")
    run_path = Path(args.run)
    run_path.parent.mkdir(parents=True, exist_ok=True)

    if args.grid:
        print("kappa_c\tkappa_d\talpha\tmean_total_us\trun")
        for cell in cells:
            results = _run_queries(index, queries, cell, threads)
            kc, kd, a = cell.kappa_c, cell.kappa_d, cell.alpha
            stem = f"{run_path.stem}.kc{kc}.kd{kd}.a{a:g}"
            cell_run = run_path.with_name(stem + run_path.suffix)
            write_run(cell_run, _rankings(index, results))
            _write_timings(run_path.with_name(stem + ".timings.csv"), results)
            mean = np.mean([r.timings_us["total_us"] for _, r in results])
            print(f"{kc}\t{kd}\t{a:g}\t{mean:.1f}\t{cell_run}")
    else:
        results = _run_queries(index, queries, params, threads)
        write_run(run_path, _rankings(index, results))
        if args.timings:
            _write_timings(args.timings, results)
        mean = np.mean([r.timings_us["total_us"] for _, r in results])
        print(f"queries = {len(results)}")
        print(f"mean_total_us = {mean:.1f}")

    if args.oracle:
        corpus = load_corpus(args.corpus)
        require_same_dim(corpus, queries)
        ranked = []
        for qid, q in queries:
            ids, scores = exhaustive_maxsim(q, corpus, k=args.k)
            ranked.append((qid, [(corpus.external_id(int(d)), float(s)) for d, s in zip(ids, scores)]))
        oracle_path = Path(args.oracle)
        write_run(oracle_path, ranked)
        print(f"oracle_run = {oracle_path}")
    return 0


def cmd_eval(args) -> int:
    metrics = args.metric or ["mrr@10", "success@5"]
    if args.oracle_run and not args.metric:
        metrics.append(f"recall@{args.recall_k}")
    for name in metrics:
        parse_metric(name)
    run = read_run(args.run)
    qrels = load_qrels(args.qrels).judgments if args.qrels else None
    oracle = read_run(args.oracle_run) if args.oracle_run else None
    for name in metrics:
        print(f"{name} = {evaluate(run, qrels, name, oracle):.6f}")
    return 0


def layout_ratio(index, queries, n_tokens: int = 4096, repeats: int = 5, seed: int = 0) -> dict:
    """Naive-over-optimized time ratio for residual scoring on random codes."""
    rng = np.random.default_rng(seed)
    codec = index.codec
    codes = rng.integers(0, codec.K, size=(n_tokens, codec.M), dtype=np.uint8)
    norms = rng.random(n_tokens, dtype=np.float32)
    t_opt = t_naive = 0.0
    for _, q in queries:
        opt = build_distance_tables(q, codec)
        naive = build_naive_tables(q, codec)
        best_o = best_n = float("inf")
        for _ in range(repeats):
            s = time.perf_counter()
            residual_scores(codes, norms, opt)
            best_o = min(best_o, time.perf_counter() - s)
            s = time.perf_counter()
            residual_scores_naive(codes, norms, naive)
            best_n = min(best_n, time.perf_counter() - s)
        t_opt += best_o
        t_naive += best_n
    return {"optimized_s": t_opt, "naive_s": t_naive, "ratio": t_naive / t_opt if t_opt else float("nan")}


def cmd_bench(args) -> int:
    params = _params(args)
    if args.warmup < 0 or args.repeats < 1 or args.layout_tokens < 1:
        raise UsageError("--warmup must be >= 0, --repeats and --layout-tokens >= 1")
    index = Index.load(args.index)
    queries = load_queries(args.queries, max_tokens=args.max_query_tokens)
    items = list(queries)
    for qid, q in items[: args.warmup]:
        search(q, index, params)
    phases = ("gather_us", "prune_us", "refine_us", "total_us")
    samples = {p: [] for p in phases}
    counters: dict[str, list[int]] = {}
    for _ in range(args.repeats):
        for qid, q in items:
            r = search(q, index, params)
            for p in phases:
                samples[p].append(r.timings_us[p])
            for key, v in itertools.chain(r.counters.items(), [("gathered", r.n_gathered), ("pruned", r.n_pruned)]):
                counters.setdefault(key, []).append(v)
    print(f"warmup_queries = {min(args.warmup, len(items))} (excluded)")
    print(f"measured_searches = {len(samples['total_us'])}")
    print("phase\tmean_us\tmedian_us\tp99_us")
    for p in phases:
        v = np.asarray(samples[p])
        print(f"{p[:-3]}\t{v.mean():.1f}\t{np.median(v):.1f}\t{np.percentile(v, 99):.1f}")
    for key, v in sorted(counters.items()):
        print(f"mean_{key} = {np.mean(v):.1f}")
    lay = layout_ratio(index, items, args.layout_tokens, seed=args.seed)
    nq = np.mean([q.shape[0] for _, q in items])
    print(f"layout_mean_nq = {nq:.1f}")
    print(f"layout_naive_s = {lay['naive_s']:.4f}")
    print(f"layout_optimized_s = {lay['optimized_s']:.4f}")
    print(f"layout_ratio = {lay['ratio']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--renormalize", action="store_true", help="renormalize rows instead of rejecting them")


def _search_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--kappa-c", type=int, default=40)
    p.add_argument("--kappa-d", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--ef-search", type=int, default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--max-query-tokens", type=int, default=32)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="tacindex", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    subs = parser.add_subparsers(dest="command", required=True)
    by_name = {}

    p = subs.add_parser("synth", help="generate a seeded synthetic corpus, queries and qrels")
    _common(p)
    d = SynthConfig()
    p.add_argument("--out", required=True)
    for name, value in d.as_dict().items():
        if name != "seed":
            p.add_argument(f"--{name.replace('_', '-')}", type=type(value), default=value)
    p.set_defaults(func=cmd_synth)
    by_name["synth"] = p

    p = subs.add_parser("stats", help="token frequency report")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--show", type=int, default=20)
    p.set_defaults(func=cmd_stats)
    by_name["stats"] = p

    p = subs.add_parser("cluster", help="token-aware clustering and assignment")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kappa", type=int, default=4096)
    p.add_argument("--mu", type=int, default=128)
    p.add_argument("--tau", type=int, default=256)
    p.add_argument("--epsilon", type=int, default=4)
    p.add_argument("--theta", type=float, default=39)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--sample-cap", type=int, default=tac.DEFAULT_SAMPLE_CAP)
    p.add_argument("--train-factor", type=int, default=tac.TRAIN_POINTS_PER_CENTROID)
    p.add_argument("--baseline", action="store_true", help="also run flat k-means with the same budget")
    p.set_defaults(func=cmd_cluster)
    by_name["cluster"] = p

    p = subs.add_parser("build", help="compress the corpus and build the centroid index")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--clusters", required=True, help="output directory of `cluster`")
    p.add_argument("--index", required=True)
    p.add_argument("--pq-m", type=int, default=32)
    p.add_argument("--pq-bits", type=int, default=8)
    p.add_argument("--pq-iterations", type=int, default=10)
    p.add_argument("--pq-sample", type=int, default=1 << 16)
    p.add_argument("--graph-m", type=int, default=32)
    p.add_argument("--ef-construction", type=int, default=200)
    p.set_defaults(func=cmd_build)
    by_name["build"] = p

    p = subs.add_parser("search", help="run queries, write a run file and per-query timings")
    _common(p)
    _search_opts(p)
    p.add_argument("--run", required=True)
    p.add_argument("--timings", help="per-query timing CSV")
    p.add_argument("--grid", action="store_true", help="one run per (kappa_c, kappa_d, alpha) cell")
    p.add_argument("--grid-kappa-c", type=_int_list, default=list(GRID_KAPPA_C))
    p.add_argument("--grid-kappa-d", type=_int_list, default=list(GRID_KAPPA_D))
    p.add_argument("--grid-alpha", type=_float_list, default=list(GRID_ALPHA))
    p.add_argument("--oracle", help="also write the exhaustive MaxSim run here")
    p.add_argument("--corpus", help="uncompressed corpus, needed by --oracle")
    p.set_defaults(func=cmd_search)
    by_name["search"] = p

    p = subs.add_parser("eval", help="score a run file")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels")
    p.add_argument("--metric", action="append", help="mrr@k, success@k or recall@k; repeatable")
    p.add_argument("--oracle-run", help="exhaustive run for recall@k")
    p.add_argument("--recall-k", type=int, default=10)
    p.set_defaults(func=cmd_eval)
    by_name["eval"] = p

    p = subs.add_parser("bench", help="latency statistics and table-layout comparison")
    _common(p)
    _search_opts(p)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--layout-tokens", type=int, default=4096)
    p.set_defaults(func=cmd_bench)
    by_name["bench"] = p
    return parser, by_name


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        _apply_config(parser, subs[args.command], args.config)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    except TacIndexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    echo_config(args)
    try:
        return args.func(args)
    except TacIndexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("internal error")
        return 3


if __name__ == "__main__":
    sys.exit(main())
