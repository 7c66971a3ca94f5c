"""Command-line entry point: ``text2db synthesize|baseline|evaluate|datagen``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .baseline import run_baseline
from .config import ConfigInvalid, load_config
from .corpus import CorpusInvalid, load_corpus
from .datagen import UnjoinableSource, flatten_ground_truth, generate_corpus
from .evaluate import Outcome, aggregate, evaluate_all
from .materialize import connect, denormalize, schema_from_sqlite
from .model import UnreachableTable, canonical_join_plan
from .pipeline import PipelineOptions, RunResult, make_gateway, rescore_run, run_pipeline

log = logging.getLogger("text2db")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _csv_list(value: str) -> list[str]:
    return [v.strip().lower() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="text2db", description="Synthesize relational databases from text.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, help="YAML configuration file")
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument("--record", type=Path, metavar="TRANSCRIPT", help="call live backends and append to TRANSCRIPT")
    mode.add_argument("--replay", type=Path, metavar="TRANSCRIPT", help="answer every backend call from TRANSCRIPT")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    syn = sub.add_parser("synthesize", help="run the four-stage pipeline over a corpus")
    syn.add_argument("corpus", type=Path)
    syn.add_argument("--out", type=Path, required=True)
    syn.add_argument("--strategy", choices=["direct", "cot"])
    syn.add_argument("--sources", type=_csv_list, help="comma-separated subset of t,s,l")
    syn.add_argument("--precedence", type=_csv_list, help="merge order, e.g. t,s,l")
    syn.add_argument("--central-table")
    syn.add_argument("--workers", type=int)

    base = sub.add_parser("baseline", help="zero-shot SQL baseline over a corpus")
    base.add_argument("corpus", type=Path)
    base.add_argument("--out", type=Path, required=True)
    base.add_argument("--workers", type=int)

    ev = sub.add_parser("evaluate", help="score a run directory or a single database")
    ev.add_argument("--corpus", type=Path, help="corpus directory (with --run)")
    ev.add_argument("--run", type=Path, help="output directory of synthesize or baseline")
    ev.add_argument("--gt", type=Path, help="ground-truth .sqlite or .csv (with --pred)")
    ev.add_argument("--pred", type=Path, help="generated .sqlite database")
    ev.add_argument("--central-table")
    ev.add_argument("--json", action="store_true", help="print the report as JSON")

    dg = sub.add_parser("datagen", help="build a benchmark corpus from a table or database")
    dg.add_argument("source", type=Path, help=".sqlite database or .csv table")
    dg.add_argument("--out", type=Path, required=True)
    dg.add_argument("--group-size", type=int, default=5)
    dg.add_argument("--domain")
    dg.add_argument("--central-table")
    dg.add_argument("--difficulty", choices=["easy", "medium", "hard"])
    dg.add_argument("--workers", type=int)
    dg.add_argument("--offline", action="store_true", help="use the templated rendering, no completion calls")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, object]:
    pairs = {
        "pipeline.strategy": getattr(args, "strategy", None),
        "pipeline.sources": getattr(args, "sources", None),
        "pipeline.precedence": getattr(args, "precedence", None),
        "pipeline.central_table": getattr(args, "central_table", None),
        "pipeline.workers": getattr(args, "workers", None),
    }
    overrides = {k: v for k, v in pairs.items() if v is not None}
    if overrides.get("pipeline.sources") and "pipeline.precedence" not in overrides:
        # a narrowed source list keeps the default order among the chosen sources
        overrides["pipeline.precedence"] = [s for s in ("t", "s", "l") if s in overrides["pipeline.sources"]]
    return overrides


def _finish(result: RunResult, out: Path) -> int:
    print(result.report.to_text(), end="")
    for doc in result.failed:
        print(f"FAILED {doc.doc_id} at {doc.stage}: {doc.error}", file=sys.stderr)
    print(f"artifacts written to {out}", file=sys.stderr)
    return EXIT_PARTIAL if result.failed else EXIT_OK


def _cmd_synthesize(args: argparse.Namespace, config) -> int:
    corpus = load_corpus(args.corpus)
    options = PipelineOptions.from_config(config)
    gateway = make_gateway(config, args.record, args.replay)
    return _finish(run_pipeline(corpus, gateway, options, args.out), args.out)


def _cmd_baseline(args: argparse.Namespace, config) -> int:
    corpus = load_corpus(args.corpus)
    gateway = make_gateway(config, args.record, args.replay)
    result = run_baseline(corpus, gateway, args.out, config.match.to_match_config(),
                          config.embedding.match_model, config.pipeline.workers)
    return _finish(result, args.out)


def _score_database(args: argparse.Namespace, config, gateway) -> int:
    gt = flatten_ground_truth(args.gt, args.central_table).rekeyed()
    with connect(args.pred) as handle:
        schema = schema_from_sqlite(handle)
        outcome = Outcome(bool(schema.tables), handle.has_nonnull_tuple(schema) if schema.tables else False)
        table = None
        if schema.tables:
            try:
                table = denormalize(handle, schema, canonical_join_plan(schema))
            except UnreachableTable as exc:
                log.warning("generated database cannot be joined: %s", exc)
    embed = lambda texts: gateway.embed_matrix(texts, config.embedding.match_model)
    report = evaluate_all(gt, table, schema, [outcome], config.match.to_match_config(), embed, args.pred.stem)
    corpus_report = aggregate([report], [outcome])
    print(corpus_report.to_json() if args.json else corpus_report.to_text(), end="")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace, config) -> int:
    gateway = make_gateway(config, args.record, args.replay)
    if args.gt is not None or args.pred is not None:
        if args.gt is None or args.pred is None or args.corpus or args.run:
            raise CorpusInvalid("use either --gt with --pred, or --corpus with --run")
        return _score_database(args, config, gateway)
    if args.corpus is None or args.run is None:
        raise CorpusInvalid("use either --gt with --pred, or --corpus with --run")
    corpus = load_corpus(args.corpus)
    if args.central_table:
        corpus.central_table = args.central_table
    result = rescore_run(corpus, args.run, gateway, config.match.to_match_config(), config.embedding.match_model)
    print(result.report.to_json() if args.json else result.report.to_text(), end="")
    return EXIT_OK


def _cmd_datagen(args: argparse.Namespace, config) -> int:
    gateway = None if args.offline else make_gateway(config, args.record, args.replay)
    out = generate_corpus(args.source, args.out, gateway, args.group_size, args.domain, args.central_table,
                          args.difficulty, args.workers or config.pipeline.workers)
    print(f"corpus written to {out}")
    return EXIT_OK


COMMANDS = {"synthesize": _cmd_synthesize, "baseline": _cmd_baseline, "evaluate": _cmd_evaluate,
            "datagen": _cmd_datagen}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, overrides=_overrides(args))
        return COMMANDS[args.command](args, config)
    except ConfigInvalid as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusInvalid, UnjoinableSource, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
