"""Command line entry point: ``kgfusion <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Each subcommand logs one JSON object per event to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from .kg import filter_by_relations, kg_stats, load_triples, save_triples, top_relations
from .partition import PartitionInfeasibleError
from .pipeline import (
    ConfigError,
    PipelineConfig,
    gradcheck_small,
    run_build_corpus,
    run_evaluate,
    run_partition,
    run_train_adapters,
    run_train_fusion,
)
from .tasks import TaskFormatError
from .train import RunReport

log = logging.getLogger("kgfusion")

GRADCHECK_TOLERANCE = 1e-4


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"event": record.getMessage(), "level": record.levelname.lower()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, sort_keys=True, default=str)


def _setup_logging() -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)
    log.propagate = False


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline config; flags override its values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config value by dotted key, e.g. adapter_train.epochs=5")
    p.add_argument("--out-dir", help="pipeline output directory")
    p.add_argument("--triples", help="triples TSV")
    p.add_argument("--mode", choices=("fused", "typed"), help="relation mode of the triples file")
    p.add_argument("--seeds", type=int, nargs="+", help="seed list for task training and evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgfusion", description="Knowledge graph adapters and fusion, end to end.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.subcommands = sub.choices

    p = sub.add_parser("stats", help="entity/relation/triple counts and top relations")
    _add_common(p)
    p.add_argument("--top", type=int, default=20)

    p = sub.add_parser("top-relations", help="most frequent relation keys")
    _add_common(p)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--out", help="write the table here instead of stdout")

    p = sub.add_parser("filter", help="keep only the top-n relations")
    _add_common(p)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--out", required=True)

    p = sub.add_parser("partition", help="balanced k-way partition of the entity graph")
    _add_common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="assignment file (default: <out-dir>/parts/assignment.tsv)")

    p = sub.add_parser("build-corpus", help="entity-prediction corpora per partition")
    _add_common(p)
    p.add_argument("--assignment", help="assignment file (default: <out-dir>/parts/assignment.tsv)")

    p = sub.add_parser("train-adapters", help="one adapter per partition corpus")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("train-fusion", help="fusion layer and task head per seed")
    _add_common(p)
    p.add_argument("--baseline", action="store_true", help="train the head on the frozen base only")

    p = sub.add_parser("evaluate", help="score trained task models")
    _add_common(p)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of a small model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)

    p = sub.add_parser("report", help="summarise run report files")
    p.add_argument("reports", nargs="+")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    direct = {"out_dir": args.out_dir, "triples": args.triples, "kg_mode": args.mode, "seeds": args.seeds}
    for key in ("k", "eps", "seed"):
        if getattr(args, key, None) is not None:
            direct["partition." + {"eps": "epsilon"}.get(key, key)] = getattr(args, key)
    out.update({k: v for k, v in direct.items() if v is not None})
    return out


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config, _overrides(args))


def _check_n(n: int) -> None:
    if n < 1:
        raise ConfigError("--n must be >= 1")


def _args_hash(args) -> str:
    blob = json.dumps(vars(args), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _dispatch(args) -> tuple[dict, str]:
    """Run one subcommand; returns log fields and the config hash."""
    cmd = args.command
    if cmd == "gradcheck":
        errors = gradcheck_small(args.seed)
        worst = max(errors.values())
        for name, err in errors.items():
            print(f"{name}\t{err:.3e}")
        print(f"max_relative_error\t{worst:.3e}")
        if worst > args.tolerance:
            raise RuntimeError(f"gradient check failed: {worst:.3e} > {args.tolerance:.1e}")
        return {"max_relative_error": worst}, _args_hash(args)
    if cmd == "report":
        for path in args.reports:
            if not Path(path).exists():
                raise ConfigError(f"report not found: {path}")
        print("report\tmetric\tn\tmean\tstd")
        for path in args.reports:
            r = RunReport.load(path)
            print(f"{path}\t{r.metric}\t{len(r.scores)}\t{r.mean:.6f}\t{r.std:.6f}")
        return {"reports": len(args.reports)}, _args_hash(args)

    cfg = _config(args)
    h = cfg.config_hash()
    if cmd in ("stats", "top-relations", "filter"):
        kg = load_triples(cfg.require(cfg.triples, "triples"), cfg.kg_mode)
        if cmd == "stats":
            _check_n(args.top)
            sys.stdout.write(kg_stats(kg, args.top))
            return {"triples": len(kg.triples)}, h
        _check_n(args.n)
        ranked = top_relations(kg, args.n)
        if cmd == "top-relations":
            text = "relation\tcount\n" + "".join(f"{k}\t{c}\n" for k, c in ranked)
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return {"relations": len(ranked)}, h
        kept = filter_by_relations(kg, {k for k, _ in ranked})
        save_triples(kept, args.out)
        return {"triples_in": len(kg.triples), "triples_out": len(kept.triples), "out": args.out}, h
    if cmd == "partition":
        info = run_partition(cfg, args.out)
        print(f"cut\t{info['cut']}\ndropped\t{info['dropped']}\nmax_part_weight\t{max(info['part_weights'])}")
        return info, h
    if cmd == "build-corpus":
        return run_build_corpus(cfg, args.assignment), h
    if cmd == "train-adapters":
        report = run_train_adapters(cfg, args.jobs)
        sys.stdout.write(report.to_tsv())
        return {"partitions": len(report.seeds), "mean_train_accuracy": report.mean}, h
    if cmd == "train-fusion":
        report = run_train_fusion(cfg, args.baseline)
        sys.stdout.write(report.to_tsv())
        return {"mean": report.mean, "std": report.std}, h
    if cmd == "evaluate":
        report = run_evaluate(cfg, args.baseline, args.split)
        sys.stdout.write(report.to_tsv())
        return {"mean": report.mean, "std": report.std}, h
    raise _UsageError(f"unknown command {cmd!r}")


def run_command(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(str(exc))
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    start = time.perf_counter()
    log.info("start", extra={"fields": {"command": args.command}})
    try:
        fields, h = _dispatch(args)
    except (ConfigError, _UsageError) as exc:
        sys.stderr.write(f"kgfusion {args.command}: error: {exc}\n")
        sys.stderr.write(parser.subcommands[args.command].format_usage())
        log.error("config_error", extra={"fields": {"command": args.command, "error": str(exc),
                                                     "wall_time": time.perf_counter() - start}})
        return 2
    except (RuntimeError, ValueError, OSError, KeyError, PartitionInfeasibleError, TaskFormatError) as exc:
        sys.stderr.write(f"kgfusion {args.command}: {exc}\n")
        log.error("failed", extra={"fields": {"command": args.command, "error": str(exc),
                                              "wall_time": time.perf_counter() - start}})
        return 1
    fields = {k: v for k, v in fields.items() if k != "part_weights"}
    log.info("done", extra={"fields": {"command": args.command, "config_hash": h,
                                       "wall_time": round(time.perf_counter() - start, 6), **fields}})
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
