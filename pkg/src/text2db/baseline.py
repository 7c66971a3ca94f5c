"""Zero-shot baseline: the model writes the SQL and the join query itself."""

from __future__ import annotations

import logging
import re
import sqlite3
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import prompts
from .corpus import Corpus, CorpusEntry
from .evaluate import Outcome
from .gateway import CompletionRequest, Gateway
from .materialize import ExecutionFailure, execute, schema_from_sqlite, split_statements, table_from_query
from .model import MatchConfig
from .pipeline import DocumentResult, RunResult, json_text, write_artifact, score_results, write_report

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```[ \t]*(?:sql|sqlite)?[ \t]*\n(.*?)```", re.DOTALL | re.IGNORECASE)


def extract_sql(raw: str) -> str:
    """SQL inside fenced code blocks, or the whole reply when there are none."""
    blocks = _FENCE.findall(raw)
    text = "\n".join(b.strip() for b in blocks) if blocks else raw.strip()
    return text + "\n" if text else ""


def build_sql_prompt(text: str) -> CompletionRequest:
    return CompletionRequest(prompts.load("baseline_sql_system"), prompts.render("baseline_sql_user", text=text),
                             0.0, tag="baseline.sql")


def build_join_prompt(sql: str) -> CompletionRequest:
    return CompletionRequest(prompts.load("baseline_join_system"),
                             prompts.render("baseline_join_user", sql_statements=sql.rstrip("\n")),
                             0.0, tag="baseline.join")


def run_join_query(connection: sqlite3.Connection, sql: str) -> tuple[list[str], list[tuple]]:
    """Execute the reply's statements; the last query that returns columns supplies the result."""
    names: list[str] = []
    rows: list[tuple] = []
    for statement in split_statements(sql):
        cursor = connection.execute(statement)
        if cursor.description:
            names = [d[0] for d in cursor.description]
            rows = [tuple(r) for r in cursor.fetchall()]
    if not names:
        raise sqlite3.OperationalError("the join reply holds no query")
    return names, rows


def run_baseline_document(entry: CorpusEntry, gateway: Gateway, out_dir: Path) -> DocumentResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    result = DocumentResult(entry.doc_id, ok=False, stage="sql")
    try:
        sql = extract_sql(gateway.complete(build_sql_prompt(entry.document.text)))
        write_artifact(out_dir / "baseline.sql", sql)
        result.stage = "execute"
        try:
            handle = execute(sql, out_dir / "db.sqlite")
        except ExecutionFailure as exc:
            result.error = str(exc)
            return result
        with handle:
            schema = schema_from_sqlite(handle)
            if not schema.tables:
                result.error = "the generated SQL created no tables"
                return result
            result.schema = schema
            result.outcome = Outcome(True, handle.has_nonnull_tuple(schema))
            result.stage = "join"
            join_sql = extract_sql(gateway.complete(build_join_prompt(sql)))
            write_artifact(out_dir / "join.sql", join_sql)
            try:
                names, rows = run_join_query(handle.connection, join_sql)
            except sqlite3.Error as exc:
                result.notes.append(f"join query failed: {exc}")
                log.warning("%s: baseline join failed: %s", entry.doc_id, exc)
                result.ok, result.stage = True, "done"
                return result
        result.table = table_from_query(names, rows, schema)
        write_artifact(out_dir / "denormalized.csv", result.table.to_csv())
        result.ok, result.stage = True, "done"
    except Exception as exc:  # isolate every document failure
        result.error = f"{type(exc).__name__}: {exc}"
        log.error("%s baseline failed during %s: %s", entry.doc_id, result.stage, result.error)
    finally:
        write_artifact(out_dir / "status.json", json_text(result.status_obj()))
    return result


def run_baseline(corpus: Corpus, gateway: Gateway, out_dir: str | Path, match: MatchConfig | None = None,
                 match_model: str = "match", workers: int = 1) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda e: run_baseline_document(e, gateway, out / e.doc_id), corpus.entries))
    report = score_results(corpus, results, gateway, match or MatchConfig(), match_model)
    write_report(report, out)
    return RunResult(results, report)
