"""Table population through the line-based ``extract`` tool format, and ensemble merging."""

from __future__ import annotations

import enum
import itertools
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from . import prompts
from .gateway import CompletionRequest, Gateway
from .model import (
    MISSING,
    CellValue,
    DataType,
    Document,
    JoinPlan,
    Record,
    Schema,
    UnreachableTable,
    canonical_join_plan,
    coerce_cell,
    schema_to_text,
)
from .values import GroupedTriplet, ParagraphAssignment, render_grouped, superkey_name

log = logging.getLogger(__name__)


class SourceKind(str, enum.Enum):
    T = "t"
    S = "s"
    L = "l"


DEFAULT_PRECEDENCE = (SourceKind.T, SourceKind.S, SourceKind.L)


class MissingTriplets(ValueError):
    pass


@dataclass(frozen=True)
class RecordSet:
    source: SourceKind
    records: tuple[Record, ...] = ()
    skipped_lines: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))


# --------------------------------------------------------------------------
# Prompt construction
# --------------------------------------------------------------------------

_TOOL_TYPES = {
    DataType.INTEGER: "int",
    DataType.REAL: "float",
    DataType.TEXT: "string",
    DataType.BOOLEAN: "boolean",
    DataType.DATE: "date",
}


def table_instructions(schema: Schema) -> str:
    """Per-table column block in the tool prompt's ``Python table schema`` notation."""
    lines = []
    for t in schema.tables:
        specs = []
        for c in t.columns:
            spec = f"{c.name}: {_TOOL_TYPES[c.data_type]}"
            if c.is_primary_key:
                spec += " [PK]"
            if c.foreign_key is not None:
                spec += f" [FK => {c.foreign_key.table_name}({c.foreign_key.column_name})]"
            specs.append(f'"{spec}"')
        lines.append(f"    - {t.name}: " + ", ".join(specs))
    return "\n".join(lines)


def data_template(schema: Schema) -> str:
    return prompts.render("extract_tool", table_instruction_str=table_instructions(schema))


def build_population_prompt(source: SourceKind | str, document: Document, schema: Schema,
                            grouped: Sequence[GroupedTriplet] | None = None,
                            identifiers: Iterable[int] | None = None) -> CompletionRequest:
    source = SourceKind(source)
    template = data_template(schema)
    if source is SourceKind.T:
        user = prompts.render("populate_t_user", text=document.text, schema=schema_to_text(schema).rstrip("\n"),
                              data_template=template)
        return CompletionRequest(prompts.load("populate_t_system"), user, 0.0, tag="populate.t")
    if grouped is None:
        raise MissingTriplets(f"source {source.name} needs grouped triplets")
    name = source.value
    system = prompts.render(f"populate_{name}_system", text=document.text, data_template=template)
    user = prompts.render(f"populate_{name}_user", superkey=superkey_name(schema),
                          triplets=render_grouped(grouped, identifiers))
    return CompletionRequest(system, user, 0.0, tag=f"populate.{name}")


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_EXTRACT_LINE = re.compile(r"^[\s>*\-`]*extract\s+[`\"']?([\w .$-]+?)[`\"']?\s*:\s*(.*)$", re.IGNORECASE)
_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


@dataclass(frozen=True)
class ExtractLine:
    table: str
    cells: tuple[tuple[str, Any], ...]
    lineno: int


def _read_quoted(body: str, i: int) -> tuple[str, int]:
    quote = body[i]
    out = []
    i += 1
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            out.append(body[i + 1])
            i += 2
            continue
        if ch == quote:
            return "".join(out), i + 1
        out.append(ch)
        i += 1
    return "".join(out), i


def _bare_value(token: str) -> Any:
    token = token.strip().rstrip(",").strip()
    low = token.lower()
    if token in ("", "?"):
        return MISSING
    if low in ("null", "none", "nan"):
        return MISSING
    if low == "true":
        return True
    if low == "false":
        return False
    if _NUMBER.match(token):
        return int(token) if re.match(r"^[+-]?\d+$", token) else float(token)
    return token


def _scan_cells(body: str) -> list[tuple[str, Any]]:
    """Split ``"k": v; "k2" v2; ...`` leniently: the colon is optional, quoted values may hold ';'."""
    cells = []
    i, n = 0, len(body)
    while i < n:
        while i < n and body[i] in " \t;,":
            i += 1
        if i >= n:
            break
        if body[i] in "\"'`":
            key, i = _read_quoted(body, i)
        else:
            m = re.compile(r"[^:;\s\"']+").match(body, i)
            if not m:
                i += 1
                continue
            key, i = m.group(0), m.end()
        while i < n and body[i] in " \t":
            i += 1
        if i < n and body[i] in ":=":
            i += 1
        while i < n and body[i] in " \t":
            i += 1
        if i < n and body[i] in "\"'":
            text, i = _read_quoted(body, i)
            value: Any = MISSING if text.strip() == "?" else text
            while i < n and body[i] not in ";":
                i += 1
        else:
            end = body.find(";", i)
            end = n if end < 0 else end
            value = _bare_value(body[i:end])
            i = end
        key = key.strip()
        if key:
            cells.append((key, value))
    return cells


def parse_extract_lines(raw: str) -> tuple[list[ExtractLine], int]:
    """Every ``extract <table>: ...`` line of ``raw``, plus the count of lines that looked like
    extractions but carried no cells."""
    out, skipped = [], 0
    for lineno, line in enumerate(raw.splitlines(), 1):
        m = _EXTRACT_LINE.match(line)
        if not m:
            continue
        cells = _scan_cells(m.group(2))
        if not cells:
            skipped += 1
            continue
        out.append(ExtractLine(m.group(1).strip(), tuple(cells), lineno))
    return out, skipped


def _id_key(value: Any) -> str | None:
    if value is MISSING or value is None:
        return None
    if isinstance(value, bool):
        return None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    text = str(value).strip()
    if re.match(r"^[+-]?\d+(\.0+)?$", text):
        text = str(int(float(text)))
    return text.casefold() or None


class _IdentifierResolver:
    """Maps emitted anchor values onto entity identifiers.

    Known integers are used directly and superkey labels are looked up; any other
    value takes the next free identifier in order of first appearance.
    """

    def __init__(self, assignment: ParagraphAssignment | None):
        self.allowed = list(assignment.identifiers) if assignment is not None else None
        self.labels: dict[str, int] = {}
        if assignment is not None:
            self.labels = {l.casefold(): i for l, i in zip(assignment.labels, assignment.identifiers) if l}
        self.cache: dict[str, int] = {}

    def _direct(self, key: str) -> int | None:
        if re.match(r"^\d+$", key) and int(key) >= 1 and (self.allowed is None or int(key) in self.allowed):
            return int(key)
        return self.labels.get(key)

    def _free(self, taken: set[int]) -> int | None:
        pool = self.allowed if self.allowed is not None else itertools.count(1)
        for ident in pool:
            if ident not in taken:
                return ident
        return None

    def prime(self, raw_values: Iterable[Any]) -> None:
        """Fix the mapping for every value up front so direct hits are never stolen."""
        keys = list(dict.fromkeys(k for k in map(_id_key, raw_values) if k is not None))
        for key in keys:
            ident = self._direct(key)
            if ident is not None and ident not in self.cache.values():
                self.cache[key] = ident
        for key in keys:
            if key not in self.cache:
                ident = self._free(set(self.cache.values()))
                if ident is not None:
                    self.cache[key] = ident

    def resolve(self, raw: Any, table_used: set[int]) -> int | None:
        key = _id_key(raw)
        if key is None:
            return self._free(table_used)
        return self.cache.get(key)


def _anchor_columns(schema: Schema, plan: JoinPlan | None) -> dict[str, str | None]:
    if plan is None:
        try:
            plan = canonical_join_plan(schema)
        except UnreachableTable:
            plan = None
    out = {}
    for t in schema.tables:
        anchor = plan.anchor_column(schema, t.name) if plan is not None else None
        out[t.name] = anchor or (t.primary_key[0] if t.primary_key else None)
    return out


def _anchor_value(ln: ExtractLine, tables: dict, anchors: dict[str, str | None]) -> Any:
    table = tables.get(ln.table.casefold())
    anchor = anchors.get(table.name) if table is not None else None
    if anchor is None:
        return None
    for key, value in ln.cells:
        if key.casefold() == anchor.casefold():
            return value
    return None


def parse_extract_records(raw: str, schema: Schema, assignment: ParagraphAssignment | None = None,
                          plan: JoinPlan | None = None, stats: dict | None = None) -> list[Record]:
    """Records from tool-format text; never raises on malformed input.

    Unknown tables skip their line and unknown columns skip their cell; both are
    counted in ``stats`` when given.
    """
    lines, skipped = parse_extract_lines(raw)
    tables = {t.name.casefold(): t for t in schema.tables}
    anchors = _anchor_columns(schema, plan)
    central_first = sorted(lines, key=lambda ln: (0 if tables.get(ln.table.casefold()) is schema.central else 1,
                                                  ln.lineno)) if schema.tables else lines
    resolver = _IdentifierResolver(assignment)
    per_table_used: dict[str, set[int]] = {}
    unknown_tables = unknown_cols = dropped = 0
    resolved: list[tuple[int, Record]] = []
    resolver.prime(_anchor_value(ln, tables, anchors) for ln in central_first)
    for ln in central_first:
        table = tables.get(ln.table.casefold())
        if table is None:
            unknown_tables += 1
            log.warning("line %d names unknown table %r; skipped", ln.lineno, ln.table)
            continue
        columns = {c.name.casefold(): c for c in table.columns}
        cells: dict[str, CellValue] = {}
        raw_cells: dict[str, Any] = {}
        for key, value in ln.cells:
            col = columns.get(key.casefold())
            if col is None:
                unknown_cols += 1
                log.info("line %d: unknown column %s.%s skipped", ln.lineno, table.name, key)
                continue
            if col.name in cells:
                continue
            raw_cells[col.name] = value
            cells[col.name] = coerce_cell(value, col.data_type)
        used = per_table_used.setdefault(table.name, set())
        anchor = anchors.get(table.name)
        ident = resolver.resolve(raw_cells.get(anchor, MISSING) if anchor else MISSING, used)
        if ident is None:
            dropped += 1
            log.warning("line %d: no identifier left for %s; skipped", ln.lineno, table.name)
            continue
        used.add(ident)
        resolved.append((ln.lineno, Record(table.name, ident, cells)))
    if stats is not None:
        stats.update(skipped_lines=skipped, unknown_tables=unknown_tables, unknown_columns=unknown_cols,
                     unplaced_lines=dropped)
    resolved.sort(key=lambda pair: pair[0])
    return [r for _, r in resolved]


# --------------------------------------------------------------------------
# Normalization and merging
# --------------------------------------------------------------------------

def _merge_cells(records: Iterable[Record]) -> dict[tuple[str, int], dict[str, CellValue]]:
    merged: dict[tuple[str, int], dict[str, CellValue]] = {}
    for r in records:
        cells = merged.setdefault((r.table_name, r.identifier), {})
        for k, v in r.cells.items():
            if cells.get(k, MISSING) is MISSING:
                cells[k] = v
    return merged


def link_keys(records: Iterable[Record], schema: Schema) -> list[Record]:
    """Force key cells onto the entity identifier so every FK resolves within its identifier.

    Integer keys become the identifier itself; a text key keeps its value and FKs copy
    the parent's value for the same identifier.
    """
    recs = list(records)
    pk_values: dict[tuple[str, int, str], CellValue] = {}
    staged = []
    for r in recs:
        table = schema.table(r.table_name)
        cells = dict(r.cells)
        for c in table.columns:
            if c.is_primary_key and c.foreign_key is None:
                if c.data_type is DataType.INTEGER:
                    cells[c.name] = r.identifier
                elif cells.get(c.name, MISSING) is MISSING:
                    cells[c.name] = str(r.identifier)
                pk_values[(table.name, r.identifier, c.name)] = cells[c.name]
        staged.append((r, table, cells))
    out = []
    for r, table, cells in staged:
        for c in table.columns:
            fk = c.foreign_key
            if fk is None:
                continue
            parent_value = pk_values.get((fk.table_name, r.identifier, fk.column_name))
            parent = schema.table(fk.table_name)
            target = parent.column(fk.column_name) if parent is not None else None
            if parent_value is not None:
                cells[c.name] = parent_value
            elif target is not None and target.data_type is DataType.INTEGER:
                cells[c.name] = r.identifier
            elif cells.get(c.name, MISSING) is MISSING:
                cells[c.name] = str(r.identifier)
            if c.is_primary_key:
                pk_values[(table.name, r.identifier, c.name)] = cells[c.name]
        out.append(Record(r.table_name, r.identifier, cells))
    return out


def _ordered(records: Iterable[Record], schema: Schema) -> list[Record]:
    order = {name: i for i, name in enumerate(schema.table_names)}
    return sorted(records, key=lambda r: (order.get(r.table_name, len(order)), r.identifier))


def normalize_records(records: Iterable[Record], schema: Schema) -> list[Record]:
    """One record per (table, identifier), first non-missing cell wins, keys linked, all
    columns present, sorted by table order then identifier."""
    merged = _merge_cells(records)
    completed = [Record(t, i, cells).completed(schema) for (t, i), cells in merged.items()]
    return _ordered(link_keys(completed, schema), schema)


def populate(source: SourceKind | str, document: Document, schema: Schema, assignment: ParagraphAssignment,
             gateway: Gateway, grouped: Sequence[GroupedTriplet] | None = None,
             plan: JoinPlan | None = None) -> RecordSet:
    source = SourceKind(source)
    request = build_population_prompt(source, document, schema, grouped, assignment.identifiers)
    raw = gateway.complete(request)
    stats: dict = {}
    records = parse_extract_records(raw, schema, assignment, plan, stats)
    if any(stats.values()):
        log.info("populate %s: %s", source.name, stats)
    return RecordSet(source, tuple(normalize_records(records, schema)), stats.get("skipped_lines", 0))


def ensemble_merge(sets: Sequence[RecordSet], schema: Schema,
                   precedence: Sequence[SourceKind | str] = DEFAULT_PRECEDENCE) -> list[Record]:
    """Union of record keys; each cell from the highest-precedence source that has a value."""
    rank = {SourceKind(s): i for i, s in enumerate(precedence)}
    ordered = sorted(sets, key=lambda rs: rank.get(rs.source, len(rank)))
    return normalize_records((r for rs in ordered for r in rs.records), schema)


def close_references(records: Iterable[Record], schema: Schema) -> list[Record]:
    """Add key-only parent records for FK values that point at no existing row."""
    recs = list(records)
    present = {(r.table_name, col, r.cells.get(col)) for r in recs
               for col in schema.table(r.table_name).primary_key}
    stubs: dict[tuple[str, int], Record] = {}
    pending = list(recs)
    while pending:
        nxt = []
        for r in pending:
            table = schema.table(r.table_name)
            for c in table.foreign_keys:
                value = r.cells.get(c.name, MISSING)
                fk = c.foreign_key
                if value is MISSING or (fk.table_name, fk.column_name, value) in present:
                    continue
                key = (fk.table_name, r.identifier)
                if key in stubs or any(x.table_name == fk.table_name and x.identifier == r.identifier for x in recs):
                    continue
                stub = Record(fk.table_name, r.identifier, {fk.column_name: value}).completed(schema)
                stubs[key] = stub
                present.add((fk.table_name, fk.column_name, value))
                nxt.append(stub)
        pending = nxt
    if stubs:
        log.info("added %d key-only parent records", len(stubs))
        recs = link_keys(recs + list(stubs.values()), schema)
    return _ordered(recs, schema)
