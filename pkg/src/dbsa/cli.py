"""Command-line interface.

Subcommands: init-model, encode, infer, bench, ablate, storage, amortize.
Exit codes: 0 success, 2 validation error (bad flags, missing/malformed files,
config-hash mismatch), 1 unexpected runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

from . import bench, kvstore, masks, model, pipeline, retrieval
from .errors import DbsaError, ValidationError


@dataclass(frozen=True)
class StorageShape:
    n_layers: int
    n_kv_heads: int
    head_dim: int


def load_pool(path) -> list[pipeline.Demonstration]:
    demos = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    demos.append(pipeline.Demonstration(obj["query"], obj["answer"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValidationError(f"{path}:{lineno}: malformed JSONL record: {exc}")
    except FileNotFoundError:
        raise ValidationError(f"dataset file not found: {path}")
    if not demos:
        raise ValidationError(f"{path}: no records")
    return demos


def load_labels(path) -> tuple[str, ...]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            labels = tuple(line.strip() for line in fh if line.strip())
    except FileNotFoundError:
        raise ValidationError(f"label file not found: {path}")
    if not labels:
        raise ValidationError(f"{path}: no labels")
    return labels


def _add_shared_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--block-size", type=int, default=50)
    p.add_argument("--local-blocks", type=int, default=2)
    p.add_argument("--pattern", choices=masks.PATTERN_NAMES, default=masks.SINK_PREV_SELF)
    p.add_argument("--ratio", type=float, default=0.30)
    p.add_argument("--granularity", choices=kvstore.GRANULARITIES, default="block")
    p.add_argument("--grouping", choices=retrieval.GROUPINGS, default="random")
    p.add_argument("--ordering", choices=retrieval.ORDERINGS, default="in-order")
    p.add_argument("--seed", type=int, default=0)


def _method_config(args, method: str = pipeline.DBSA) -> pipeline.MethodConfig:
    return pipeline.MethodConfig(
        method=method,
        pattern=masks.AttentionPattern.from_name(args.pattern, args.local_blocks),
        block_size=args.block_size,
        ratio=args.ratio,
        granularity=args.granularity,
        grouping=retrieval.GroupingStrategy(args.grouping, args.seed),
        ordering=args.ordering,
        seed=args.seed,
    )


def _load_task(args) -> pipeline.TaskSpec:
    pool = load_pool(args.pool)
    labels = load_labels(args.labels)
    return pipeline.TaskSpec(tuple(pool), labels)


def cmd_init_model(args) -> int:
    config = model.ModelConfig(
        d_model=args.heads * args.head_dim,
        n_layers=args.layers,
        n_heads=args.heads,
        n_kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        ffn_dim=args.ffn_dim,
        vocab_size=args.vocab_size,
        max_seq_len=args.max_seq_len,
    )
    weights = model.init_random(config, args.seed)
    model.save_weights(weights, args.out)
    print(f"wrote {args.out} (config hash {weights.config_hash.hex()[:16]})")
    return 0


def cmd_encode(args) -> int:
    weights = model.load_weights(args.model)
    task = _load_task(args)
    config = _method_config(args)
    encoded = pipeline.encode_pool(weights, task, config)
    os.makedirs(args.out, exist_ok=True)
    cache_path = os.path.join(args.out, "cache.dbsa")
    index_path = os.path.join(args.out, "index.json")
    kvstore.serialize(encoded.cache, cache_path)
    encoded.index.save(index_path)
    manifest = {
        "model_config_hash": weights.config_hash.hex(),
        "config_digest": config.digest(),
        "n_blocks": encoded.cache.n_blocks,
        "total_tokens": encoded.cache.total_tokens,
        "encode_seconds": encoded.encode_seconds,
        "index_seconds": encoded.index_seconds,
        "attended_pairs": encoded.metrics.attended_tokens[0],
        "cache_bytes": encoded.metrics.cache_bytes,
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(
        f"encoded {encoded.cache.n_blocks} blocks / {encoded.cache.total_tokens} tokens "
        f"-> {cache_path}"
    )
    return 0


def cmd_infer(args) -> int:
    weights = model.load_weights(args.model)
    task = _load_task(args)
    config = _method_config(args, method=args.method)
    cache = index = None
    if config.method in (pipeline.DBSA, pipeline.FIXED_ICL):
        if not args.cache:
            raise ValidationError(f"method {config.method!r} requires --cache")
        cache = kvstore.deserialize(args.cache, weights.config)
    if config.method in (pipeline.DBSA, pipeline.RET_ICL):
        if not args.index:
            raise ValidationError(f"method {config.method!r} requires --index")
        index = retrieval.Bm25Index.load(args.index)
    label, qm = pipeline.infer(weights, cache, index, config, args.query, task)
    print(
        json.dumps(
            {
                "label": label,
                "attended_pairs": qm.attended_pairs,
                "attention_flops": qm.attention_flops,
                "retrieval_seconds": qm.retrieval_seconds,
                "assembly_seconds": qm.assembly_seconds,
                "scoring_seconds": qm.scoring_seconds,
                "total_seconds": qm.total_seconds,
            },
            indent=2,
        )
    )
    return 0


def cmd_bench(args) -> int:
    weights = model.load_weights(args.model)
    task = _load_task(args)
    tests = load_pool(args.test)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    base = _method_config(args)
    seeds = list(range(args.seed, args.seed + args.runs))
    result = bench.run_bench(
        weights, task, tests, methods, base, seeds, dataset=os.path.basename(args.pool)
    )
    paths = bench.write_bench_artifacts(result, args.out)
    for row in result.report:
        print(
            f"{row.method}: accuracy {row.accuracy_mean:.3f} +/- {row.accuracy_std:.3f}, "
            f"attended pairs {row.attended_pairs_mean:.0f}"
        )
    print(f"report: {paths['report_csv']}")
    return 0


def cmd_ablate(args) -> int:
    weights = model.load_weights(args.model)
    task = _load_task(args)
    tests = load_pool(args.test)
    base = _method_config(args)
    rows = pipeline.run_ablation(weights, task, tests, args.axis, base=base)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablate.csv")
    json_path = os.path.join(args.out, "ablate.json")
    manifest = {
        "axis": args.axis,
        "seed": args.seed,
        "base_config_digest": base.digest(),
        "model_config_hash": weights.config_hash.hex(),
        "n_queries": len(tests),
        "rows": [r.config_digest for r in rows],
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("axis,value,config_digest,accuracy,n_queries,attended_pairs_mean,attention_flops_mean\n")
        for r in rows:
            fh.write(
                f"{r.axis},{r.value},{r.config_digest},{r.accuracy:.6f},{r.n_queries},"
                f"{r.mean_attended_pairs:.10g},{r.mean_attention_flops:.10g}\n"
            )
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(
            [
                {
                    "axis": r.axis,
                    "value": r.value,
                    "config_digest": r.config_digest,
                    "accuracy": r.accuracy,
                    "n_queries": r.n_queries,
                    "attended_pairs_mean": r.mean_attended_pairs,
                    "attention_flops_mean": r.mean_attention_flops,
                    "selected_ids_per_query": [list(s) for s in r.selected_ids_per_query],
                }
                for r in rows
            ],
            fh,
            indent=2,
        )
    for r in rows:
        print(f"{r.axis}={r.value}: accuracy {r.accuracy:.3f}")
    print(f"rows: {csv_path}")
    return 0


def cmd_storage(args) -> int:
    shape = StorageShape(args.layers, args.kv_heads, args.head_dim)
    per_token = kvstore.storage_bytes(shape, 1, args.bytes_per_value)
    print(f"bytes/token: {per_token}")
    print(f"MiB/token: {per_token / 2**20:.3f}")
    for n in args.tokens:
        total = kvstore.storage_bytes(shape, n, args.bytes_per_value)
        print(f"tokens={n} bytes={total} GiB={total / 2**30:.2f}")
    return 0


def cmd_amortize(args) -> int:
    try:
        with open(args.timings, "r", encoding="utf-8") as fh:
            timings = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"timings file not found: {args.timings}")
    lines = ["method,seed,n_requests,amortized_seconds"]
    for run in timings["runs"]:
        points = bench.amortize_points(
            run["setup_seconds"], run["mean_query_seconds"], args.requests
        )
        for n, cost in points:
            lines.append(f"{run['method']},{run['seed']},{n},{cost:.10g}")
    output = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(output)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(output)
    return 0


def _int_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbsa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a random weight file for desk-scale runs")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--ffn-dim", type=int, default=128)
    p.add_argument("--vocab-size", type=int, default=259)
    p.add_argument("--max-seq-len", type=int, default=32768)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("encode", help="encode a demonstration pool into cache + index files")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("infer", help="answer a single query")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--cache")
    p.add_argument("--index")
    p.add_argument("--method", default="dbsa")
    p.add_argument("--query", required=True)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="run methods x dataset and emit reports")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--methods", default="dbsa,fixed,ret,zero")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="sweep one design axis")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--axis", choices=pipeline.ABLATION_AXES, required=True)
    p.add_argument("--out", required=True)
    _add_shared_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("storage", help="KV storage cost table for a model shape")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--kv-heads", type=int, required=True)
    p.add_argument("--head-dim", type=int, required=True)
    p.add_argument("--bytes-per-value", type=int, default=2)
    p.add_argument("--tokens", type=_int_list, default=[30000, 90000])
    p.set_defaults(func=cmd_storage)

    p = sub.add_parser("amortize", help="cost-vs-requests curve from a timings file")
    p.add_argument("--timings", required=True)
    p.add_argument("--requests", type=_int_list, default=[1, 10, 100, 1000, 10000, 100000])
    p.add_argument("--out")
    p.set_defaults(func=cmd_amortize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DbsaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
