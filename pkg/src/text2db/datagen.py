"""Benchmark corpus construction: flatten a ground-truth source, verbalize rows, group into documents."""

from __future__ import annotations

import json
import logging
import math
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import prompts
from .gateway import BackendUnavailable, CompletionRequest, Gateway, ReplayMiss
from .materialize import DenormalizedTable, connect, denormalize, read_csv_table, schema_from_sqlite
from .model import Difficulty, Document, UnreachableTable, canonical_join_plan, validate_schema

log = logging.getLogger(__name__)

SQLITE_SUFFIXES = (".sqlite", ".sqlite3", ".db")


class UnjoinableSource(ValueError):
    pass


def flatten_ground_truth(source: str | Path, central_table: str | None = None) -> DenormalizedTable:
    """One row per central-entity instance: a CSV as-is, or a database through its canonical join."""
    source = Path(source)
    if source.suffix.lower() == ".csv":
        return read_csv_table(source)
    if source.suffix.lower() not in SQLITE_SUFFIXES:
        raise UnjoinableSource(f"unsupported ground-truth format: {source.name}")
    with connect(source) as handle:
        schema = schema_from_sqlite(handle, central_table)
        if not schema.tables:
            raise UnjoinableSource(f"{source.name} holds no tables")
        report = validate_schema(schema)
        if report.fk_violations:
            raise UnjoinableSource(f"{source.name}: invalid foreign keys: {', '.join(report.fk_violations)}")
        try:
            plan = canonical_join_plan(schema)
        except UnreachableTable as exc:
            raise UnjoinableSource(str(exc)) from exc
        return denormalize(handle, schema, plan)


def is_nan(value: Any) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    text = str(value).strip()
    return text == "" or text.lower() == "nan"


def column_label(name: str) -> str:
    return name.split(".", 1)[-1].replace("_", " ").strip()


def render_row(names: Sequence[str], row: Sequence[Any], skip: Sequence[int] = ()) -> str:
    """``"<col> is <value>."`` clauses joined by spaces; nan cells and ``skip`` positions omitted."""
    skipped = set(skip)
    parts = [f"{column_label(n)} is {v}." for j, (n, v) in enumerate(zip(names, row))
             if j not in skipped and not is_nan(v)]
    return " ".join(parts)


def build_datagen_prompt(rendering: str) -> CompletionRequest:
    return CompletionRequest(prompts.load("datagen_system"), prompts.render("datagen_user", sentence=rendering),
                             0.0, tag="datagen")


def row_to_sentence(names: Sequence[str], row: Sequence[Any], gateway: Gateway | None,
                    skip: Sequence[int] = ()) -> str:
    """Paraphrase of the row rendering; the rendering itself when the gateway fails."""
    rendering = render_row(names, row, skip)
    if not rendering or gateway is None:
        return rendering
    try:
        text = gateway.complete(build_datagen_prompt(rendering))
    except (BackendUnavailable, ReplayMiss) as exc:
        log.warning("verbalization fell back to the plain rendering: %s", exc)
        return rendering
    text = re.sub(r"\s+", " ", text).strip()
    return text or rendering


def build_documents(sentences: Sequence[str], group_size: int = 5, domain: str = "",
                    difficulty: Difficulty | str | None = None) -> list[Document]:
    """Consecutive chunks of ``group_size`` sentences, one paragraph per sentence."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    docs = []
    for start in range(0, len(sentences), group_size):
        chunk = sentences[start:start + group_size]
        docs.append(Document.from_paragraphs(chunk, domain=domain, difficulty=difficulty,
                                             doc_id=f"doc_{start // group_size + 1:03d}"))
    return docs


def generate_corpus(source: str | Path, out_dir: str | Path, gateway: Gateway | None, group_size: int = 5,
                    domain: str | None = None, central_table: str | None = None,
                    difficulty: str | None = None, workers: int = 1) -> Path:
    """Write ``ground_truth.*``, ``documents/`` and ``manifest.json`` under ``out_dir``."""
    source = Path(source)
    out = Path(out_dir)
    table = flatten_ground_truth(source, central_table)
    skip = table.key_columns if source.suffix.lower() != ".csv" else ()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sentences = list(pool.map(lambda row: row_to_sentence(table.names, row, gateway, skip), table.rows))
    kept = [(i, s) for i, s in enumerate(sentences) if s]
    docs = build_documents([s for _, s in kept], group_size, domain or source.stem, difficulty)
    (out / "documents").mkdir(parents=True, exist_ok=True)
    gt_name = "ground_truth.csv" if source.suffix.lower() == ".csv" else "ground_truth.sqlite"
    if source.resolve() != (out / gt_name).resolve():
        shutil.copyfile(source, out / gt_name)
    entries = []
    for k, doc in enumerate(docs):
        rel = f"documents/{doc.doc_id}.txt"
        (out / rel).write_text(doc.text + "\n", encoding="utf-8")
        rows = [i for i, _ in kept[k * group_size:(k + 1) * group_size]]
        entries.append({"file": rel, "difficulty": difficulty, "gt_rows": rows})
    central = central_table
    if central is None and gt_name.endswith(".sqlite"):
        central = table.columns[0].split(".", 1)[0] if table.columns else None
    manifest = {"domain": domain or source.stem, "central_table": central, "documents": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d documents from %d rows to %s", len(docs), len(table.rows), out)
    return out
