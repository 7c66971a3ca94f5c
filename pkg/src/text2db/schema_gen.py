"""Schema generation: prompt construction, lenient parsing of model output, repair and retry."""

from __future__ import annotations

import enum
import logging
import re
from typing import Any

from . import prompts
from .gateway import CompletionRequest, Gateway
from .literal import byte_offset, match_bracket, parse_literal
from .model import (
    Column,
    Document,
    ForeignKey,
    Schema,
    Table,
    coerce_data_type,
    is_reserved,
    validate_schema,
)

log = logging.getLogger(__name__)


class PromptStrategy(str, enum.Enum):
    DIRECT = "direct"
    COT = "cot"


class ParseFailure(ValueError):
    """Model output could not be read as a schema; ``offset`` is a byte offset into it."""

    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class SchemaGenerationFailed(RuntimeError):
    def __init__(self, message: str, attempts: int, problems: list[str] | None = None):
        self.attempts = attempts
        self.problems = list(problems or [])
        super().__init__(message)


_TEMPLATES = {
    PromptStrategy.DIRECT: ("schema_direct_system", "schema_direct_user"),
    PromptStrategy.COT: ("schema_cot_system", "schema_cot_user"),
}


def build_schema_prompt(document: Document, strategy: PromptStrategy | str) -> CompletionRequest:
    strategy = PromptStrategy(strategy)
    if document.is_empty():
        raise ValueError("cannot generate a schema for an empty document")
    system_name, user_name = _TEMPLATES[strategy]
    return CompletionRequest(
        system_prompt=prompts.load(system_name),
        user_prompt=prompts.render(user_name, text=document.text),
        temperature=0.0,
        tag=f"schema.{strategy.value}",
    )


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_LEADING_COMMENTS = re.compile(r"\A(?:\s*#[^\n]*)+")


def _candidates(raw: str) -> list[int]:
    """Start positions of list/dict literals that look like a schema."""
    starts = []
    for m in re.finditer(r"[\[{]", raw):
        rest = _LEADING_COMMENTS.sub("", raw[m.end():]).lstrip()
        if m.group(0) == "[" and rest.startswith("{"):
            starts.append(m.start())
        elif m.group(0) == "{" and re.match(r"[\"'](tables|schema)[\"']", rest):
            starts.append(m.start())
    return starts


def parse_schema_response(raw: str) -> Schema:
    """Read a schema out of model text: fenced or bare, JSON or Python-literal syntax."""
    starts = _candidates(raw)
    if not starts:
        raise ParseFailure("no schema literal found", byte_offset(raw, len(raw)))
    parsed: list[Any] = []
    first_error: ParseFailure | None = None
    consumed = -1
    for start in starts:
        if start < consumed:
            continue
        end = match_bracket(raw, start)
        if end < 0:
            first_error = first_error or ParseFailure("unbalanced brackets", byte_offset(raw, start))
            continue
        try:
            value = parse_literal(raw[start:end])
        except (SyntaxError, ValueError) as exc:
            local = getattr(exc, "offset", None) or 1
            lines = raw[start:end].splitlines(keepends=True)
            lineno = getattr(exc, "lineno", None) or 1
            idx = start + sum(len(x) for x in lines[:lineno - 1]) + local - 1
            first_error = first_error or ParseFailure(f"invalid literal: {exc.__class__.__name__}",
                                                      byte_offset(raw, min(idx, len(raw))))
            continue
        consumed = end
        parsed.append((start, value))
    for start, value in reversed(parsed):
        try:
            return schema_from_loose(value)
        except ParseFailure as exc:
            first_error = first_error or ParseFailure(str(exc.args[0]).split(" (at byte")[0],
                                                      byte_offset(raw, start))
    raise first_error or ParseFailure("no schema literal found", 0)


def _truthy(value: Any) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("true", "yes", "1", "y")
    return bool(value)


def _first(d: dict, *keys: str) -> Any:
    for k in keys:
        if k in d:
            return d[k]
    return None


def schema_from_loose(obj: Any) -> Schema:
    """Accept the common variants models emit; unknown extras (indexes, checks) are dropped."""
    if isinstance(obj, dict):
        obj = _first(obj, "tables", "schema")
    if not isinstance(obj, list) or not obj:
        raise ParseFailure("schema must be a nonempty list of tables")
    tables = []
    for raw_table in obj:
        if not isinstance(raw_table, dict):
            raise ParseFailure("every table must be a mapping")
        name = _first(raw_table, "table_name", "name", "table")
        raw_cols = _first(raw_table, "columns", "fields", "attributes")
        if not isinstance(name, str) or not isinstance(raw_cols, list):
            raise ParseFailure("table entry needs a name and a column list")
        table_pk = raw_table.get("primary_key")
        table_pk = {table_pk} if isinstance(table_pk, str) else set(table_pk or []) if isinstance(table_pk, list) else set()
        cols = []
        for raw_col in raw_cols:
            if not isinstance(raw_col, dict):
                raise ParseFailure(f"column entry of {name} is not a mapping")
            cname = _first(raw_col, "name", "column_name", "column")
            if not isinstance(cname, str):
                raise ParseFailure(f"column of {name} has no name")
            dtype = coerce_data_type(_first(raw_col, "type", "data_type", "datatype") or "TEXT")
            is_pk = _truthy(_first(raw_col, "primary_key", "is_primary_key", "pk")) or cname in table_pk
            cols.append(Column(cname.strip(), dtype, is_pk, _loose_fk(raw_col)))
        tables.append(Table(name.strip(), tuple(cols)))
    return Schema(tuple(tables))


def _loose_fk(raw_col: dict) -> ForeignKey | None:
    fk = _first(raw_col, "foreign_key", "references", "fk")
    table = _first(raw_col, "foreign_key_table", "references_table", "ref_table")
    column = _first(raw_col, "foreign_key_column", "references_column", "ref_column")
    if isinstance(fk, dict):
        table = table or _first(fk, "table", "table_name")
        column = column or _first(fk, "column", "column_name")
    elif isinstance(fk, str):
        m = re.match(r"\s*([\w\s]+?)\s*[(.]\s*(\w+)\s*\)?\s*$", fk)
        if m:
            table, column = table or m.group(1), column or m.group(2)
        elif fk.strip() and fk.strip().lower() not in ("true", "false"):
            table = table or fk.strip()
    elif fk is not None and not _truthy(fk) and table is None:
        return None
    if not isinstance(table, str) or not table.strip():
        return None
    column = column if isinstance(column, str) and column.strip() else "id"
    return ForeignKey(table.strip(), column.strip())


# --------------------------------------------------------------------------
# Repair of reserved identifiers
# --------------------------------------------------------------------------

def _fresh(name: str, suffix: str, taken: set[str]) -> str:
    candidate = name + suffix
    while candidate in taken:
        candidate += suffix
    return candidate


def rename_reserved(schema: Schema) -> tuple[Schema, list[tuple[str, str]]]:
    """Suffix reserved table names with ``_tbl`` and column names with ``_col``; FKs follow."""
    renames: list[tuple[str, str]] = []
    table_map: dict[str, str] = {}
    taken = set(schema.table_names)
    for t in schema.tables:
        if is_reserved(t.name):
            new = _fresh(t.name, "_tbl", taken)
            taken.add(new)
            table_map[t.name] = new
            renames.append((t.name, new))
    col_map: dict[tuple[str, str], str] = {}
    for t in schema.tables:
        names = set(t.column_names)
        for c in t.columns:
            if is_reserved(c.name):
                new = _fresh(c.name, "_col", names)
                names.add(new)
                col_map[(t.name, c.name)] = new
                renames.append((f"{t.name}.{c.name}", f"{table_map.get(t.name, t.name)}.{new}"))
    if not renames:
        return schema, []
    tables = []
    for t in schema.tables:
        cols = []
        for c in t.columns:
            fk = c.foreign_key
            if fk is not None:
                fk = ForeignKey(table_map.get(fk.table_name, fk.table_name),
                                col_map.get((fk.table_name, fk.column_name), fk.column_name))
            cols.append(Column(col_map.get((t.name, c.name), c.name), c.data_type, c.is_primary_key, fk))
        tables.append(Table(table_map.get(t.name, t.name), tuple(cols)))
    for old, new in renames:
        log.warning("renamed reserved identifier %s to %s", old, new)
    return Schema(tuple(tables)), renames


# --------------------------------------------------------------------------
# Generation loop
# --------------------------------------------------------------------------

def generate_schema(document: Document, strategy: PromptStrategy | str, gateway: Gateway,
                    max_retries: int = 3, central_table: str | None = None) -> Schema:
    """Ask for a schema until one parses and validates; at most ``1 + max_retries`` completions."""
    if max_retries < 0:
        raise ValueError("max_retries must be >= 0")
    base = build_schema_prompt(document, strategy)
    problems: list[str] = []
    attempts = max_retries + 1
    for attempt in range(1, attempts + 1):
        raw = gateway.complete(base.retry(attempt))
        try:
            schema = parse_schema_response(raw)
        except ParseFailure as exc:
            problems = [str(exc)]
            log.warning("schema attempt %d/%d unparseable: %s", attempt, attempts, exc)
            continue
        schema, _ = rename_reserved(schema)
        if central_table:
            if schema.table(central_table) is None:
                problems = [f"central table {central_table!r} absent"]
                log.warning("schema attempt %d/%d lacks central table %s", attempt, attempts, central_table)
                continue
            schema = schema.with_central(central_table)
        report = validate_schema(schema)
        if report.ok:
            log.info("schema accepted on attempt %d (%d tables)", attempt, len(schema.tables))
            return schema
        problems = report.problems()
        log.warning("schema attempt %d/%d rejected: %s", attempt, attempts, "; ".join(problems))
    raise SchemaGenerationFailed(f"no valid schema after {attempts} attempts", attempts, problems)
