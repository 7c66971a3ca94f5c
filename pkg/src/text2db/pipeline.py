"""End-to-end synthesis over a corpus: stages, per-document artifacts, and scoring."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .config import Config
from .corpus import Corpus, CorpusEntry
from .evaluate import CorpusReport, EmptyJoin, MetricReport, Outcome, aggregate, evaluate_all, fk_coverage, \
    pk_coverage, ref_integrity
from .gateway import (
    CoreNLPBackend,
    ExactMatchEmbedder,
    Gateway,
    HashingEmbedder,
    HttpEmbedder,
    OpenAIChatBackend,
    SentenceTransformerEmbedder,
    Transcript,
)
from .materialize import (
    DenormalizedTable,
    ExecutionFailure,
    connect,
    denormalize,
    emit_create_tables,
    emit_inserts,
    execute,
    read_csv_table,
    schema_from_sqlite,
    table_from_query,
)
from .model import MatchConfig, Schema, canonical_join_plan, records_to_text, schema_from_text, schema_to_text
from .population import DEFAULT_PRECEDENCE, RecordSet, SourceKind, close_references, ensemble_merge, populate
from .schema_gen import ParseFailure, PromptStrategy, generate_schema
from .values import (
    assign_identifiers,
    augment_triplets,
    deduplicate_by_paragraph,
    extract_aligned_triplets,
    extract_symbolic_triplets,
    group_triplets,
    pos_coverage_gap,
    render_grouped,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineOptions:
    strategy: PromptStrategy = PromptStrategy.DIRECT
    sources: tuple[SourceKind, ...] = DEFAULT_PRECEDENCE
    precedence: tuple[SourceKind, ...] = DEFAULT_PRECEDENCE
    central_table: str | None = None
    max_retries: int = 3
    match: MatchConfig = field(default_factory=MatchConfig)
    dedup_model: str = "dedup"
    match_model: str = "match"
    workers: int = 1

    @classmethod
    def from_config(cls, config: Config) -> PipelineOptions:
        p = config.pipeline
        return cls(PromptStrategy(p.strategy), tuple(SourceKind(s) for s in p.sources),
                   tuple(SourceKind(s) for s in p.precedence), p.central_table, p.max_retries,
                   config.match.to_match_config(), config.embedding.dedup_model, config.embedding.match_model,
                   p.workers)


def make_gateway(config: Config, record: str | Path | None = None, replay: str | Path | None = None) -> Gateway:
    """Gateway wired from configuration; ``record``/``replay`` name a transcript file."""
    if record and replay:
        raise ValueError("--record and --replay are mutually exclusive")
    emb = config.embedding
    if emb.backend == "hashing":
        make = lambda _model: HashingEmbedder()
    elif emb.backend == "http":
        if not emb.url:
            raise ValueError("embedding.url is required for the http embedding backend")
        make = lambda model: HttpEmbedder(emb.url, model, emb.api_key)
    else:
        make = lambda model: SentenceTransformerEmbedder(model)
    embedders = {emb.dedup_model: make(emb.dedup_model), emb.match_model: make(emb.match_model)}
    comp = config.completion
    completer = OpenAIChatBackend(comp.url, comp.model, comp.api_key) if comp.url else None
    annotator = CoreNLPBackend(config.annotation.url) if config.annotation.url else None
    if replay:
        return Gateway(completer, embedders, annotator, Transcript.load(replay), mode="replay")
    if record:
        return Gateway(completer, embedders, annotator, Transcript.load(record), mode="record")
    return Gateway(completer, embedders, annotator, None, mode="live")


def exact_match_gateway() -> Gateway:
    """Offline gateway whose embeddings score 1 for equal strings and 0 otherwise."""
    shared = ExactMatchEmbedder()
    return Gateway(embedders={"dedup": shared, "match": shared})


# --------------------------------------------------------------------------
# Per-document run
# --------------------------------------------------------------------------

@dataclass
class DocumentResult:
    doc_id: str
    ok: bool
    stage: str
    error: str | None = None
    schema: Schema | None = None
    outcome: Outcome = Outcome(False, False)
    table: DenormalizedTable | None = None
    notes: list[str] = field(default_factory=list)

    def status_obj(self) -> dict[str, Any]:
        return {"doc_id": self.doc_id, "status": "ok" if self.ok else "failed", "stage": self.stage,
                "error": self.error, "materialized": self.outcome.materialized,
                "has_nonnull_tuple": self.outcome.has_nonnull_tuple, "notes": self.notes}


def write_artifact(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def run_document(entry: CorpusEntry, gateway: Gateway, options: PipelineOptions, out_dir: Path) -> DocumentResult:
    """All four stages for one document; any failure is captured in the result, never raised."""
    out_dir.mkdir(parents=True, exist_ok=True)
    result = DocumentResult(entry.doc_id, ok=False, stage="schema")
    doc = entry.document
    dedup_embed: Callable[[Sequence[str]], np.ndarray] = lambda t: gateway.embed_matrix(t, options.dedup_model)
    try:
        schema = generate_schema(doc, options.strategy, gateway, options.max_retries, options.central_table)
        result.schema = schema
        write_artifact(out_dir / "schema.json", schema_to_text(schema))
        plan = canonical_join_plan(schema)

        result.stage = "values"
        assignment = assign_identifiers(doc, schema, gateway)
        write_artifact(out_dir / "assignment.json", json_text(assignment.to_obj()))
        grouped: dict[SourceKind, list] = {}
        if SourceKind.S in options.sources:
            if gateway.can_annotate:
                symbolic = extract_symbolic_triplets(doc, gateway)
                symbolic = deduplicate_by_paragraph(symbolic, options.match.dedup_threshold, dedup_embed)
                grouped[SourceKind.S] = group_triplets(symbolic, assignment)
                write_artifact(out_dir / "triplets_symbolic.txt", render_grouped(grouped[SourceKind.S], assignment.identifiers))
            else:
                result.notes.append("source S skipped: no annotation backend")
                log.warning("%s: no annotation backend, skipping source S", entry.doc_id)
        if SourceKind.L in options.sources:
            try:
                aligned = extract_aligned_triplets(doc, schema, gateway)
            except ParseFailure as exc:
                result.notes.append(f"aligned triplets unparseable: {exc}")
                log.warning("%s: aligned triplets unparseable, continuing without: %s", entry.doc_id, exc)
                aligned = []
            if gateway.can_annotate:
                missing = pos_coverage_gap(doc, aligned, gateway)
                aligned = augment_triplets(doc, schema, aligned, missing, gateway)
            else:
                result.notes.append("coverage augmentation skipped: no annotation backend")
            aligned = deduplicate_by_paragraph(aligned, options.match.dedup_threshold, dedup_embed)
            grouped[SourceKind.L] = group_triplets(aligned, assignment)
            write_artifact(out_dir / "triplets_aligned.txt", render_grouped(grouped[SourceKind.L], assignment.identifiers))

        result.stage = "population"
        sets: list[RecordSet] = []
        for source in options.sources:
            if source is not SourceKind.T and source not in grouped:
                continue
            rs = populate(source, doc, schema, assignment, gateway, grouped.get(source), plan)
            write_artifact(out_dir / f"records_{source.value}.jsonl", records_to_text(rs.records))
            sets.append(rs)
        merged = close_references(ensemble_merge(sets, schema, options.precedence), schema)
        write_artifact(out_dir / "records.jsonl", records_to_text(merged))

        result.stage = "materialize"
        create, inserts = emit_create_tables(schema), emit_inserts(schema, merged)
        write_artifact(out_dir / "schema.sql", create)
        write_artifact(out_dir / "inserts.sql", inserts)
        try:
            handle = execute(create + inserts, out_dir / "db.sqlite")
        except ExecutionFailure as exc:
            result.error = str(exc)
            return result
        with handle:
            result.outcome = Outcome(True, handle.has_nonnull_tuple(schema))
            result.table = denormalize(handle, schema, plan)
        write_artifact(out_dir / "denormalized.csv", result.table.to_csv())
        result.ok, result.stage = True, "done"
    except Exception as exc:  # isolate every document failure
        result.error = f"{type(exc).__name__}: {exc}"
        log.error("%s failed during %s: %s", entry.doc_id, result.stage, result.error)
    finally:
        write_artifact(out_dir / "status.json", json_text(result.status_obj()))
    return result


# --------------------------------------------------------------------------
# Corpus run and scoring
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    documents: list[DocumentResult]
    report: CorpusReport

    @property
    def failed(self) -> list[DocumentResult]:
        return [d for d in self.documents if not d.ok]


def score_document(corpus: Corpus, entry: CorpusEntry, result: DocumentResult, config: MatchConfig,
                   embed: Callable[[Sequence[str]], np.ndarray]) -> MetricReport:
    gt = corpus.ground_truth_for(entry)
    if gt is not None:
        return evaluate_all(gt, result.table, result.schema, [result.outcome], config, embed, entry.doc_id)
    report = MetricReport(doc_id=entry.doc_id, dbr=float(result.outcome.materialized and result.outcome.has_nonnull_tuple),
                          flags=["no_ground_truth"])
    if result.schema is not None:
        report.pkc, report.fkc = pk_coverage(result.schema), fk_coverage(result.schema)
    if result.table is not None:
        try:
            report.rrir = ref_integrity(result.table)
        except EmptyJoin:
            report.flags.append("empty_join")
    return report


def write_report(report: CorpusReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_artifact(out_dir / "report.json", report.to_json())
    write_artifact(out_dir / "report.txt", report.to_text())


def score_results(corpus: Corpus, results: Sequence[DocumentResult], gateway: Gateway, match: MatchConfig,
                  match_model: str) -> CorpusReport:
    embed = lambda t: gateway.embed_matrix(t, match_model)
    reports = []
    for entry, res in zip(corpus.entries, results):
        try:
            reports.append(score_document(corpus, entry, res, match, embed))
        except Exception as exc:  # a scoring error must not hide the other documents
            log.error("%s could not be scored: %s", entry.doc_id, exc)
            reports.append(MetricReport(doc_id=entry.doc_id, flags=[f"scoring_failed: {exc}"]))
    return aggregate(reports, [r.outcome for r in results])


def load_document_result(doc_id: str, doc_dir: Path, central_table: str | None = None) -> DocumentResult:
    """Rebuild a result from a document's artifacts (``synthesize`` or ``baseline`` output)."""
    result = DocumentResult(doc_id, ok=False, stage="load")
    status_path = doc_dir / "status.json"
    if status_path.exists():
        status = json.loads(status_path.read_text(encoding="utf-8"))
        result.ok = status.get("status") == "ok"
        result.stage, result.error = status.get("stage", "load"), status.get("error")
        result.notes = list(status.get("notes", []))
        result.outcome = Outcome(bool(status.get("materialized")), bool(status.get("has_nonnull_tuple")))
    db_path = doc_dir / "db.sqlite"
    if not result.outcome.materialized or not db_path.exists():
        if (doc_dir / "schema.json").exists():
            result.schema = schema_from_text((doc_dir / "schema.json").read_text(encoding="utf-8"))
        return result
    with connect(db_path) as handle:
        if (doc_dir / "schema.json").exists():
            result.schema = schema_from_text((doc_dir / "schema.json").read_text(encoding="utf-8"))
            result.table = denormalize(handle, result.schema, canonical_join_plan(result.schema))
        else:
            result.schema = schema_from_sqlite(handle, central_table)
            csv_path = doc_dir / "denormalized.csv"
            if csv_path.exists():
                flat = read_csv_table(csv_path)
                result.table = table_from_query(flat.columns, flat.rows, result.schema)
    return result


def rescore_run(corpus: Corpus, run_dir: str | Path, gateway: Gateway, match: MatchConfig,
                match_model: str = "match") -> RunResult:
    """Score an existing run directory against the corpus ground truth and rewrite its report."""
    run = Path(run_dir)
    results = [load_document_result(e.doc_id, run / e.doc_id, corpus.central_table) for e in corpus.entries]
    report = score_results(corpus, results, gateway, match, match_model)
    write_report(report, run)
    return RunResult(results, report)


def run_pipeline(corpus: Corpus, gateway: Gateway, options: PipelineOptions, out_dir: str | Path) -> RunResult:
    """Synthesize a database per document (in parallel), write artifacts and the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, options.workers)) as pool:
        results = list(pool.map(lambda e: run_document(e, gateway, options, out / e.doc_id), corpus.entries))
    report = score_results(corpus, results, gateway, options.match, options.match_model)
    write_report(report, out)
    return RunResult(results, report)
