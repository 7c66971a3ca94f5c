"""Domain types shared by every stage: schemas, documents, records, join plans."""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

log = logging.getLogger(__name__)

RESERVED_KEYWORDS: tuple[str, ...] = (
    "order", "group", "select", "from", "where", "join", "on", "as", "and", "or",
    "by", "insert", "update", "delete", "create", "drop", "alter", "into", "table",
)


class DataType(str, enum.Enum):
    INTEGER = "INTEGER"
    REAL = "REAL"
    TEXT = "TEXT"
    BOOLEAN = "BOOLEAN"
    DATE = "DATE"


_TYPE_ALIASES = {
    "INT": DataType.INTEGER, "INTEGER": DataType.INTEGER, "BIGINT": DataType.INTEGER,
    "SMALLINT": DataType.INTEGER, "TINYINT": DataType.INTEGER, "SERIAL": DataType.INTEGER,
    "REAL": DataType.REAL, "FLOAT": DataType.REAL, "DOUBLE": DataType.REAL,
    "DECIMAL": DataType.REAL, "NUMERIC": DataType.REAL, "NUMBER": DataType.REAL,
    "TEXT": DataType.TEXT, "VARCHAR": DataType.TEXT, "CHAR": DataType.TEXT,
    "STRING": DataType.TEXT, "NVARCHAR": DataType.TEXT, "CLOB": DataType.TEXT,
    "BOOLEAN": DataType.BOOLEAN, "BOOL": DataType.BOOLEAN,
    "DATE": DataType.DATE, "DATETIME": DataType.DATE, "TIMESTAMP": DataType.DATE, "TIME": DataType.DATE,
}


def coerce_data_type(raw: Any, *, quiet: bool = False) -> DataType:
    """Map a free-form type string onto the five supported types; unknowns become TEXT."""
    if isinstance(raw, DataType):
        return raw
    head = re.split(r"[\s(]", str(raw).strip().upper(), maxsplit=1)[0] if raw is not None else ""
    dtype = _TYPE_ALIASES.get(head)
    if dtype is None:
        if not quiet:
            log.warning("unknown column type %r coerced to TEXT", raw)
        return DataType.TEXT
    return dtype


def is_reserved(name: str) -> bool:
    return name.strip().lower() in RESERVED_KEYWORDS


@dataclass(frozen=True)
class ForeignKey:
    table_name: str
    column_name: str


@dataclass(frozen=True)
class Column:
    name: str
    data_type: DataType = DataType.TEXT
    is_primary_key: bool = False
    foreign_key: ForeignKey | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.data_type, DataType):
            object.__setattr__(self, "data_type", coerce_data_type(self.data_type))


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def primary_key(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.is_primary_key)

    @property
    def foreign_keys(self) -> tuple[Column, ...]:
        return tuple(c for c in self.columns if c.foreign_key is not None)

    def column(self, name: str) -> Column | None:
        for col in self.columns:
            if col.name == name:
                return col
        return None


@dataclass(frozen=True)
class Schema:
    """Ordered tables; the first one is the central table."""

    tables: tuple[Table, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tables", tuple(self.tables))

    @property
    def central(self) -> Table:
        if not self.tables:
            raise ValueError("schema has no tables")
        return self.tables[0]

    @property
    def table_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tables)

    def table(self, name: str) -> Table | None:
        for t in self.tables:
            if t.name == name:
                return t
        return None

    def foreign_keys(self) -> Iterator[tuple[Table, Column]]:
        for t in self.tables:
            for col in t.foreign_keys:
                yield t, col

    def with_central(self, name: str) -> Schema:
        """Return a copy with ``name`` moved to the front."""
        target = self.table(name)
        if target is None:
            raise KeyError(f"no table named {name!r}")
        return Schema((target,) + tuple(t for t in self.tables if t.name != name))

    def all_column_names(self) -> list[str]:
        return [c.name for t in self.tables for c in t.columns]


# --------------------------------------------------------------------------
# Validation and join planning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationReport:
    pk_violations: tuple[str, ...] = ()
    fk_violations: tuple[str, ...] = ()
    keyword_violations: tuple[str, ...] = ()
    connectivity_violations: tuple[str, ...] = ()
    structure_violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not (self.pk_violations or self.fk_violations or self.keyword_violations
                    or self.connectivity_violations or self.structure_violations)

    def problems(self) -> list[str]:
        out = []
        for label, items in (("missing primary key", self.pk_violations),
                             ("foreign key", self.fk_violations),
                             ("reserved keyword", self.keyword_violations),
                             ("unreachable from central table", self.connectivity_violations),
                             ("structure", self.structure_violations)):
            out.extend(f"{label}: {item}" for item in items)
        return out


def _fk_edge_valid(schema: Schema, col: Column) -> bool:
    fk = col.foreign_key
    parent = schema.table(fk.table_name) if fk else None
    if parent is None:
        return False
    target = parent.column(fk.column_name)
    return target is not None and target.is_primary_key


def _fk_cycles(schema: Schema) -> list[str]:
    graph = {t.name: sorted({c.foreign_key.table_name for c in t.foreign_keys
                             if c.foreign_key.table_name != t.name}) for t in schema.tables}
    state: dict[str, int] = {}
    cycles: list[str] = []

    def visit(node: str, path: list[str]) -> None:
        state[node] = 1
        for nxt in graph.get(node, ()):
            if nxt not in graph:
                continue
            if state.get(nxt) == 1:
                cycles.append(" -> ".join(path[path.index(nxt):] + [nxt]))
            elif nxt not in state:
                visit(nxt, path + [nxt])
        state[node] = 2

    for t in schema.tables:
        if t.name not in state:
            visit(t.name, [t.name])
    return cycles


def validate_schema(schema: Schema) -> ValidationReport:
    """Check every structural invariant of ``schema``; violations are returned, never raised."""
    pk, fk, kw, conn, struct = [], [], [], [], []
    if not schema.tables:
        struct.append("schema has no tables")
    seen_tables: set[str] = set()
    for t in schema.tables:
        if not t.name.strip():
            struct.append("table with empty name")
        elif t.name in seen_tables:
            struct.append(f"duplicate table name {t.name}")
        seen_tables.add(t.name)
        if is_reserved(t.name):
            kw.append(t.name)
        if not t.columns:
            struct.append(f"table {t.name} has no columns")
        if not t.primary_key:
            pk.append(t.name)
        seen_cols: set[str] = set()
        for col in t.columns:
            if not col.name.strip():
                struct.append(f"column with empty name in {t.name}")
                continue
            if col.name in seen_cols:
                struct.append(f"duplicate column {t.name}.{col.name}")
            seen_cols.add(col.name)
            if is_reserved(col.name):
                kw.append(f"{t.name}.{col.name}")
            if col.foreign_key is not None and not _fk_edge_valid(schema, col):
                ref = col.foreign_key
                fk.append(f"{t.name}.{col.name} -> {ref.table_name}.{ref.column_name}")
    fk.extend(f"cycle {c}" for c in _fk_cycles(schema))
    if schema.tables and not struct:
        try:
            canonical_join_plan(schema)
        except UnreachableTable as exc:
            conn.extend(exc.tables)
    return ValidationReport(tuple(pk), tuple(fk), tuple(kw), tuple(conn), tuple(struct))


class UnreachableTable(ValueError):
    def __init__(self, tables: Sequence[str]):
        self.tables = tuple(tables)
        super().__init__(f"no foreign-key path to the central table from: {', '.join(self.tables)}")


@dataclass(frozen=True)
class JoinStep:
    child_table: str
    fk_column: str
    parent_table: str
    pk_column: str


@dataclass(frozen=True)
class JoinPlan:
    central: str
    steps: tuple[JoinStep, ...] = ()

    def tables(self) -> list[str]:
        """Tables in join order, central first."""
        out = [self.central]
        for step in self.steps:
            out.append(step.parent_table if step.child_table in out else step.child_table)
        return out

    def anchor_column(self, schema: Schema, table_name: str) -> str | None:
        """Column of ``table_name`` that carries the entity identifier toward the central table."""
        table = schema.table(table_name)
        if table is None:
            return None
        for step in self.steps:
            if step.child_table == table_name and self._joined_before(step.parent_table, step):
                return step.fk_column
        return table.primary_key[0] if table.primary_key else None

    def _joined_before(self, name: str, step: JoinStep) -> bool:
        order = self.tables()
        idx = self.steps.index(step) + 1
        return name in order[:idx]


def canonical_join_plan(schema: Schema) -> JoinPlan:
    """Spanning tree of the FK graph rooted at the central table, in schema order."""
    central = schema.central.name
    joined = [central]
    steps: list[JoinStep] = []
    pending = [t for t in schema.tables[1:]]
    progress = True
    while pending and progress:
        progress = False
        for table in list(pending):
            step = _link(schema, table, joined)
            if step is not None:
                steps.append(step)
                joined.append(table.name)
                pending.remove(table)
                progress = True
    if pending:
        raise UnreachableTable([t.name for t in pending])
    return JoinPlan(central, tuple(steps))


def _link(schema: Schema, table: Table, joined: list[str]) -> JoinStep | None:
    # New table as child: it references something already joined.
    for col in table.foreign_keys:
        ref = col.foreign_key
        if ref.table_name in joined and _fk_edge_valid(schema, col):
            return JoinStep(table.name, col.name, ref.table_name, ref.column_name)
    # New table as parent: something already joined references it.
    for name in joined:
        other = schema.table(name)
        for col in other.foreign_keys:
            ref = col.foreign_key
            if ref.table_name == table.name and _fk_edge_valid(schema, col):
                return JoinStep(other.name, col.name, table.name, ref.column_name)
    return None


# --------------------------------------------------------------------------
# Documents, cells, records
# --------------------------------------------------------------------------

class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


PARAGRAPH_SEPARATOR = "\n\n"
_BLANK_LINE = re.compile(r"\n\s*\n")


@dataclass(frozen=True)
class Document:
    text: str
    paragraphs: tuple[str, ...]
    domain: str = ""
    difficulty: Difficulty | None = None
    doc_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "paragraphs", tuple(self.paragraphs))
        if not self.paragraphs:
            raise ValueError("a document needs at least one paragraph")
        if PARAGRAPH_SEPARATOR.join(self.paragraphs) != self.text:
            raise ValueError("paragraphs do not reconstruct the document text")
        if self.difficulty is not None and not isinstance(self.difficulty, Difficulty):
            object.__setattr__(self, "difficulty", Difficulty(self.difficulty))

    @classmethod
    def from_text(cls, text: str, **kwargs: Any) -> Document:
        """Split on blank lines; a text without blank lines is one paragraph."""
        parts = [p.strip() for p in _BLANK_LINE.split(text.strip())]
        parts = [p for p in parts if p] or [""]
        return cls(PARAGRAPH_SEPARATOR.join(parts), tuple(parts), **kwargs)

    @classmethod
    def from_paragraphs(cls, paragraphs: Iterable[str], **kwargs: Any) -> Document:
        parts = tuple(p.strip() for p in paragraphs) or ("",)
        return cls(PARAGRAPH_SEPARATOR.join(parts), parts, **kwargs)

    def is_empty(self) -> bool:
        return not self.text.strip()


class _Missing(enum.Enum):
    MISSING = "?"

    def __repr__(self) -> str:
        return "MISSING"

    def __bool__(self) -> bool:
        return False


MISSING = _Missing.MISSING
CellValue = Union[int, float, str, bool, _Missing]

_INT_RE = re.compile(r"^[+-]?\d+$")
_THOUSANDS_RE = re.compile(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$")
_TRUE = {"true", "yes", "y", "1", "t"}
_FALSE = {"false", "no", "n", "0", "f"}


def _clean_text(value: Any) -> str:
    if isinstance(value, bool):
        text = "true" if value else "false"
    elif isinstance(value, float) and value.is_integer():
        text = str(int(value))
    else:
        text = str(value)
    return text.replace("\x00", "")


def coerce_cell(value: Any, data_type: DataType) -> CellValue:
    """Convert a raw value to ``data_type``; on failure keep the text form and log it."""
    if value is None or value is MISSING:
        return MISSING
    if isinstance(value, str):
        stripped = value.strip()
        if stripped in ("", "?"):
            return MISSING
    else:
        stripped = None
    try:
        if data_type is DataType.INTEGER:
            if isinstance(value, bool):
                return int(value)
            if isinstance(value, int):
                return value
            if isinstance(value, float):
                if math.isfinite(value) and value.is_integer():
                    return int(value)
                raise ValueError
            s = stripped.replace(",", "") if _THOUSANDS_RE.match(stripped) else stripped
            if _INT_RE.match(s):
                return int(s)
            f = float(s)
            if math.isfinite(f) and f.is_integer():
                return int(f)
            raise ValueError
        if data_type is DataType.REAL:
            if isinstance(value, bool):
                return float(value)
            if isinstance(value, (int, float)):
                f = float(value)
            else:
                s = stripped.replace(",", "") if _THOUSANDS_RE.match(stripped) else stripped
                f = float(s)
            if not math.isfinite(f):
                raise ValueError
            return f
        if data_type is DataType.BOOLEAN:
            if isinstance(value, bool):
                return value
            if isinstance(value, (int, float)) and value in (0, 1):
                return bool(value)
            low = str(value).strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
    except (ValueError, TypeError, OverflowError):
        log.info("value %r does not fit %s; keeping its text form", value, data_type.value)
        return _clean_text(value).strip() or MISSING
    # TEXT and DATE keep their text form.
    if isinstance(value, float) and not math.isfinite(value):
        return MISSING
    return _clean_text(value)


@dataclass(frozen=True)
class Record:
    """One tuple of one table, tagged with the entity instance it describes."""

    table_name: str
    identifier: int
    cells: Mapping[str, CellValue] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.identifier, bool) or not isinstance(self.identifier, int) or self.identifier < 1:
            raise ValueError(f"record identifier must be an integer >= 1, got {self.identifier!r}")
        object.__setattr__(self, "cells", dict(self.cells))

    def get(self, column: str) -> CellValue:
        return self.cells.get(column, MISSING)

    def is_empty(self, ignore: Iterable[str] = ()) -> bool:
        skip = set(ignore)
        return all(v is MISSING for k, v in self.cells.items() if k not in skip)

    def completed(self, schema: Schema) -> Record:
        """Same record with every column of its table present (absent ones MISSING)."""
        table = schema.table(self.table_name)
        cells = {c.name: self.cells.get(c.name, MISSING) for c in table.columns}
        return Record(self.table_name, self.identifier, cells)


def check_record(record: Record, schema: Schema) -> list[str]:
    table = schema.table(record.table_name)
    if table is None:
        return [f"unknown table {record.table_name}"]
    return [f"unknown column {record.table_name}.{k}" for k in record.cells if table.column(k) is None]


def key_columns(table: Table) -> set[str]:
    return {c.name for c in table.columns if c.is_primary_key or c.foreign_key is not None}


# --------------------------------------------------------------------------
# Matching thresholds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchConfig:
    numeric_tolerance: float = 0.01
    value_sim_threshold: float = 0.8
    column_sim_threshold: float = 0.7
    dedup_threshold: float = 0.97

    def __post_init__(self) -> None:
        for name in ("value_sim_threshold", "column_sim_threshold", "dedup_threshold"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if not self.numeric_tolerance > 0:
            raise ValueError(f"numeric_tolerance must be > 0, got {self.numeric_tolerance}")


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def schema_to_obj(schema: Schema) -> list[dict[str, Any]]:
    out = []
    for t in schema.tables:
        cols = []
        for c in t.columns:
            entry: dict[str, Any] = {"name": c.name, "type": c.data_type.value}
            if c.is_primary_key:
                entry["primary_key"] = True
            if c.foreign_key is not None:
                entry["foreign_key"] = True
                entry["foreign_key_table"] = c.foreign_key.table_name
                entry["foreign_key_column"] = c.foreign_key.column_name
            cols.append(entry)
        out.append({"table_name": t.name, "columns": cols})
    return out


def schema_to_text(schema: Schema) -> str:
    """Canonical schema document: a JSON list shaped like the prompt's example."""
    return json.dumps(schema_to_obj(schema), indent=4, ensure_ascii=False) + "\n"


class SchemaFormatError(ValueError):
    pass


def schema_from_obj(obj: Any, *, strict: bool = True) -> Schema:
    """Build a Schema from the list-of-tables shape; ``strict`` rejects unknown types and keys."""
    if isinstance(obj, dict) and "tables" in obj:
        obj = obj["tables"]
    if not isinstance(obj, list):
        raise SchemaFormatError("schema must be a list of tables")
    tables = []
    for i, raw_table in enumerate(obj):
        if not isinstance(raw_table, dict):
            raise SchemaFormatError(f"table #{i} is not a mapping")
        name = raw_table.get("table_name", raw_table.get("name"))
        raw_cols = raw_table.get("columns")
        if not isinstance(name, str) or not isinstance(raw_cols, list):
            raise SchemaFormatError(f"table #{i} needs 'table_name' and a 'columns' list")
        cols = []
        for j, raw_col in enumerate(raw_cols):
            if not isinstance(raw_col, dict) or not isinstance(raw_col.get("name"), str):
                raise SchemaFormatError(f"column #{j} of {name} needs a 'name'")
            raw_type = raw_col.get("type", raw_col.get("data_type", "TEXT"))
            if strict:
                try:
                    dtype = DataType(str(raw_type))
                except ValueError:
                    raise SchemaFormatError(f"unknown type {raw_type!r} for {name}.{raw_col['name']}") from None
            else:
                dtype = coerce_data_type(raw_type)
            cols.append(Column(raw_col["name"], dtype, bool(raw_col.get("primary_key", False)),
                               _foreign_key_of(raw_col)))
        tables.append(Table(name, tuple(cols)))
    return Schema(tuple(tables))


def _foreign_key_of(raw_col: Mapping[str, Any]) -> ForeignKey | None:
    fk = raw_col.get("foreign_key")
    if isinstance(fk, dict):
        table, column = fk.get("table") or fk.get("table_name"), fk.get("column") or fk.get("column_name")
    elif isinstance(fk, str) and "(" in fk:
        table, _, rest = fk.partition("(")
        column = rest.rstrip(") ")
    else:
        table = raw_col.get("foreign_key_table") or raw_col.get("references_table")
        column = raw_col.get("foreign_key_column") or raw_col.get("references_column")
        if not fk and table is None:
            return None
    if not table:
        return None
    return ForeignKey(str(table).strip(), str(column or "id").strip())


def schema_from_text(text: str) -> Schema:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaFormatError(f"invalid schema document: {exc}") from exc
    return schema_from_obj(obj, strict=True)


def _cell_to_json(value: CellValue) -> Any:
    return None if value is MISSING else value


def record_to_line(record: Record) -> str:
    return json.dumps({"table": record.table_name, "identifier": record.identifier,
                       "cells": {k: _cell_to_json(v) for k, v in record.cells.items()}},
                      ensure_ascii=False)


def record_from_line(line: str) -> Record:
    obj = json.loads(line)
    cells = {k: (MISSING if v is None else v) for k, v in obj["cells"].items()}
    return Record(obj["table"], int(obj["identifier"]), cells)


def records_to_text(records: Iterable[Record]) -> str:
    return "".join(record_to_line(r) + "\n" for r in records)


def records_from_text(text: str) -> list[Record]:
    return [record_from_line(line) for line in text.splitlines() if line.strip()]
