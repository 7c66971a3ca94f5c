"""Deterministic SQL emission, execution on SQLite, and canonical-join flattening."""

from __future__ import annotations

import csv
import io
import logging
import math
import sqlite3
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .model import (
    MISSING,
    CellValue,
    Column,
    DataType,
    ForeignKey,
    JoinPlan,
    Record,
    Schema,
    Table,
    coerce_cell,
    key_columns,
)

log = logging.getLogger(__name__)


class ExecutionFailure(RuntimeError):
    def __init__(self, index: int, statement: str, diagnostic: str):
        self.index = index
        self.statement = statement
        self.diagnostic = diagnostic
        super().__init__(f"statement {index} failed: {diagnostic}")


class JoinFailure(RuntimeError):
    pass


def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def sql_literal(value: CellValue) -> str:
    if value is MISSING or value is None:
        return "NULL"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            return "NULL"
        return repr(value)
    return "'" + str(value).replace("'", "''") + "'"


def dependency_order(schema: Schema) -> list[Table]:
    """Tables with every referenced parent first; ties keep schema order. Cycles keep schema order."""
    remaining = list(schema.tables)
    done: set[str] = set()
    out: list[Table] = []
    names = set(schema.table_names)
    while remaining:
        for t in remaining:
            parents = {c.foreign_key.table_name for c in t.foreign_keys} & names - {t.name}
            if parents <= done:
                break
        else:
            t = remaining[0]
            log.warning("foreign-key cycle through %s; keeping schema order", t.name)
        remaining.remove(t)
        done.add(t.name)
        out.append(t)
    return out


_SQL_TYPES = {
    DataType.INTEGER: "INTEGER",
    DataType.REAL: "REAL",
    DataType.TEXT: "TEXT",
    DataType.BOOLEAN: "BOOLEAN",
    DataType.DATE: "DATE",
}


def _create_statement(table: Table) -> str:
    pk = table.primary_key
    parts = []
    for c in table.columns:
        spec = f"{quote_ident(c.name)} {_SQL_TYPES[c.data_type]}"
        if len(pk) == 1 and c.is_primary_key:
            spec += " PRIMARY KEY"
        if c.foreign_key is not None:
            spec += f" REFERENCES {quote_ident(c.foreign_key.table_name)} ({quote_ident(c.foreign_key.column_name)})"
        parts.append(spec)
    if len(pk) > 1:
        parts.append("PRIMARY KEY (" + ", ".join(quote_ident(p) for p in pk) + ")")
    return f"CREATE TABLE {quote_ident(table.name)} (" + ", ".join(parts) + ");"


def emit_create_tables(schema: Schema) -> str:
    return "".join(_create_statement(t) + "\n" for t in dependency_order(schema))


def emit_inserts(schema: Schema, records: Iterable[Record]) -> str:
    """One INSERT per record: tables in dependency order, then ascending identifier."""
    by_table: dict[str, list[Record]] = {}
    for r in records:
        by_table.setdefault(r.table_name, []).append(r)
    lines = []
    for table in dependency_order(schema):
        for r in sorted(by_table.get(table.name, []), key=lambda rec: rec.identifier):
            cols = [c.name for c in table.columns if c.name in r.cells]
            if not cols:
                continue
            names = ",".join(quote_ident(c) for c in cols)
            values = ",".join(sql_literal(r.cells[c]) for c in cols)
            lines.append(f"INSERT INTO {quote_ident(table.name)} ({names}) VALUES ({values});\n")
    return "".join(lines)


def split_statements(script: str) -> list[str]:
    """Split on semicolons that end complete statements (quotes and comments respected)."""
    out, buf = [], ""
    for line in script.splitlines(keepends=True):
        buf += line
        if sqlite3.complete_statement(buf):
            if buf.strip():
                out.append(buf.strip())
            buf = ""
    if buf.strip():
        out.append(buf.strip())
    return out


@dataclass
class DatabaseHandle:
    path: str
    connection: sqlite3.Connection

    def close(self) -> None:
        self.connection.close()

    def __enter__(self) -> DatabaseHandle:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def table_names(self) -> list[str]:
        rows = self.connection.execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")
        return [r[0] for r in rows]

    def row_count(self) -> int:
        return sum(self.connection.execute(f"SELECT COUNT(*) FROM {quote_ident(t)}").fetchone()[0]
                   for t in self.table_names())

    def has_nonnull_tuple(self, schema: Schema | None = None) -> bool:
        """True iff some row has a non-null cell outside its key columns."""
        for name in self.table_names():
            cols = [r[1] for r in self.connection.execute(f"PRAGMA table_info({quote_ident(name)})")]
            keys = set()
            table = schema.table(name) if schema is not None else None
            if table is not None:
                keys = key_columns(table)
            else:
                keys = {r[1] for r in self.connection.execute(f"PRAGMA table_info({quote_ident(name)})") if r[5]}
                keys |= {r[3] for r in self.connection.execute(f"PRAGMA foreign_key_list({quote_ident(name)})")}
            payload = [c for c in cols if c not in keys] or cols
            cond = " OR ".join(f"{quote_ident(c)} IS NOT NULL" for c in payload)
            if self.connection.execute(f"SELECT 1 FROM {quote_ident(name)} WHERE {cond} LIMIT 1").fetchone():
                return True
        return False


def connect(path: str | Path) -> DatabaseHandle:
    conn = sqlite3.connect(str(path), check_same_thread=False)
    return DatabaseHandle(str(path), conn)


def execute(script: str, path: str | Path = ":memory:") -> DatabaseHandle:
    """Run ``script`` statement by statement into a fresh database at ``path``."""
    if str(path) != ":memory:":
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        if p.exists():
            p.unlink()
    handle = connect(path)
    conn = handle.connection
    for index, statement in enumerate(split_statements(script)):
        try:
            conn.execute(statement)
        except sqlite3.Error as exc:
            conn.commit()
            handle.close()
            raise ExecutionFailure(index, statement, str(exc)) from exc
    conn.commit()
    return handle


# --------------------------------------------------------------------------
# Reading back
# --------------------------------------------------------------------------

_AFFINITY = {"INT": DataType.INTEGER, "REAL": DataType.REAL, "FLOA": DataType.REAL, "DOUB": DataType.REAL,
             "BOOL": DataType.BOOLEAN, "DATE": DataType.DATE, "TIME": DataType.DATE, "NUM": DataType.REAL,
             "DEC": DataType.REAL}


def _type_of(declared: str) -> DataType:
    upper = (declared or "").upper()
    for prefix, dtype in _AFFINITY.items():
        if prefix in upper:
            return dtype
    return DataType.TEXT


def schema_from_sqlite(handle: DatabaseHandle, central: str | None = None) -> Schema:
    """Schema of an existing database, from the engine's catalog."""
    conn = handle.connection
    tables = []
    for name in handle.table_names():
        fks = {r[3]: ForeignKey(r[2], r[4] or "") for r in conn.execute(f"PRAGMA foreign_key_list({quote_ident(name)})")}
        cols = []
        for cid, cname, ctype, _notnull, _default, pk in conn.execute(f"PRAGMA table_info({quote_ident(name)})"):
            cols.append(Column(cname, _type_of(ctype), bool(pk), fks.get(cname)))
        tables.append(Table(name, tuple(cols)))
    # An FK naming no column refers to the parent's primary key.
    fixed = []
    by_name = {t.name: t for t in tables}
    for t in tables:
        cols = []
        for c in t.columns:
            fk = c.foreign_key
            if fk is not None and not fk.column_name and fk.table_name in by_name:
                parent_pk = by_name[fk.table_name].primary_key
                fk = ForeignKey(fk.table_name, parent_pk[0] if parent_pk else "rowid")
            cols.append(Column(c.name, c.data_type, c.is_primary_key, fk))
        fixed.append(Table(t.name, tuple(cols)))
    schema = Schema(tuple(fixed))
    return schema.with_central(central) if central else schema


def _from_sql(value: Any, dtype: DataType) -> CellValue:
    # Column affinity may have turned a text fallback into a number; coercing again undoes that.
    return coerce_cell(value, dtype)


def read_records(handle: DatabaseHandle, schema: Schema) -> list[Record]:
    """Rows of every table as Records; the identifier is the row's integer key (or rowid)."""
    out = []
    for table in schema.tables:
        names = ", ".join(quote_ident(c.name) for c in table.columns)
        rows = handle.connection.execute(f"SELECT rowid, {names} FROM {quote_ident(table.name)} ORDER BY rowid")
        for row in rows:
            cells = {c.name: _from_sql(v, c.data_type) for c, v in zip(table.columns, row[1:])}
            ident = row[0]
            pk = table.primary_key
            if len(pk) == 1 and isinstance(cells.get(pk[0]), int) and not isinstance(cells[pk[0]], bool) \
                    and cells[pk[0]] >= 1:
                ident = cells[pk[0]]
            out.append(Record(table.name, max(int(ident), 1), cells))
    return out


# --------------------------------------------------------------------------
# Denormalization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DenormalizedTable:
    """Flat join result. ``columns`` are ``table.column`` labels, ``names`` the bare names."""

    columns: tuple[str, ...]
    names: tuple[str, ...]
    rows: tuple[tuple[Any, ...], ...]
    key_columns: tuple[int, ...] = ()
    key_column: int | None = None

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def keys(self) -> list[Any]:
        if self.key_column is None:
            return []
        return [row[self.key_column] for row in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow(["" if v is None else v for v in row])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def subset(self, row_indices: Sequence[int]) -> DenormalizedTable:
        return DenormalizedTable(self.columns, self.names, tuple(self.rows[i] for i in row_indices),
                                 self.key_columns, self.key_column)

    def rekeyed(self) -> DenormalizedTable:
        """Central keys replaced by 1..k in row order (documents are compared per position).

        A table without a key gets a leading ``row`` key column.
        """
        if self.key_column is None:
            rows = tuple((i,) + tuple(row) for i, row in enumerate(self.rows, 1))
            return DenormalizedTable(("row",) + self.columns, ("row",) + self.names, rows,
                                     (0,) + tuple(k + 1 for k in self.key_columns), 0)
        rows = []
        for i, row in enumerate(self.rows, 1):
            row = list(row)
            row[self.key_column] = i
            rows.append(tuple(row))
        return DenormalizedTable(self.columns, self.names, tuple(rows), self.key_columns, self.key_column)


def _join_sql(schema: Schema, plan: JoinPlan) -> tuple[str, list[tuple[str, str]]]:
    order = plan.tables()
    selected = [(t, c.name) for t in order for c in schema.table(t).columns]
    select = ", ".join(f"{quote_ident(t)}.{quote_ident(c)}" for t, c in selected)
    sql = f"SELECT {select} FROM {quote_ident(plan.central)}"
    for k, step in enumerate(plan.steps):
        child, parent = quote_ident(step.child_table), quote_ident(step.parent_table)
        # Step k brings in the (k + 1)-th table of the join order.
        sql += (f" LEFT JOIN {quote_ident(order[k + 1])} ON {child}.{quote_ident(step.fk_column)}"
                f" = {parent}.{quote_ident(step.pk_column)}")
    central = schema.table(plan.central)
    order_by = central.primary_key or central.column_names[:1]
    sql += " ORDER BY " + ", ".join(f"{quote_ident(plan.central)}.{quote_ident(c)}" for c in order_by)
    sql += ", " + ", ".join(f"{quote_ident(t)}.rowid" for t in order)
    return sql, selected


def denormalize(handle: DatabaseHandle, schema: Schema, plan: JoinPlan) -> DenormalizedTable:
    """Left outer joins from the central table along ``plan``; null cells are kept."""
    sql, selected = _join_sql(schema, plan)
    try:
        rows = handle.connection.execute(sql).fetchall()
    except sqlite3.Error as exc:
        raise JoinFailure(f"canonical join failed: {exc}") from exc
    keys = tuple(i for i, (t, c) in enumerate(selected)
                 if (col := schema.table(t).column(c)).is_primary_key or col.foreign_key is not None)
    central = schema.table(plan.central)
    key_col = None
    if central.primary_key:
        key_col = selected.index((plan.central, central.primary_key[0]))
    return DenormalizedTable(tuple(f"{t}.{c}" for t, c in selected), tuple(c for _, c in selected),
                             tuple(tuple(r) for r in rows), keys, key_col)


def table_from_query(names: Sequence[str], rows: Sequence[Sequence[Any]], schema: Schema) -> DenormalizedTable:
    """Wrap an arbitrary query result, marking key columns by their names in ``schema``."""
    key_names = {c.name for t in schema.tables for c in t.columns if c.is_primary_key or c.foreign_key}
    central_pk = schema.central.primary_key[0] if schema.tables and schema.central.primary_key else None
    names = tuple(n.split(".", 1)[-1] for n in names)
    keys = tuple(i for i, n in enumerate(names) if n in key_names)
    key_col = next((i for i, n in enumerate(names) if n == central_pk), None)
    return DenormalizedTable(names, names, tuple(tuple(r) for r in rows), keys, key_col)


def read_csv_table(path: str | Path) -> DenormalizedTable:
    """A flat CSV as a keyless denormalized table; empty cells are nulls."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        rows = [tuple(None if v == "" else v for v in row) for row in reader if any(cell.strip() for cell in row)]
    names = tuple(h.split(".", 1)[-1] for h in header)
    return DenormalizedTable(tuple(header), names, tuple(rows))
