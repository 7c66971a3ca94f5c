"""The eight database-quality metrics and their per-document and corpus reports."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .gateway import similarity_matrix
from .materialize import DenormalizedTable
from .model import MatchConfig, Schema

log = logging.getLogger(__name__)

EmbedFn = Callable[[Sequence[str]], np.ndarray]
METRICS = ("dbr", "ecs", "pkc", "fkc", "rrir", "tc", "vc", "cc")


class EmptyJoin(ValueError):
    pass


@dataclass(frozen=True)
class Outcome:
    materialized: bool
    has_nonnull_tuple: bool


# --------------------------------------------------------------------------
# Value normalization and similarity
# --------------------------------------------------------------------------

def humanize(name: str) -> str:
    """Column label used for name similarity: bare name, separators as spaces, case-folded."""
    return re.sub(r"[_\s]+", " ", name).strip().casefold()


def value_text(value: Any) -> str | None:
    """Trimmed, case-folded text of a cell; None for nulls and blanks."""
    if value is None:
        return None
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    text = str(value).strip().casefold()
    return text or None


_NUMERIC = re.compile(r"[+-]?(\d{1,3}(,\d{3})+|\d+)(\.\d*)?([eE][+-]?\d+)?|[+-]?\.\d+([eE][+-]?\d+)?")


def numeric(value: Any) -> float | None:
    """Float value of a cell when it reads as a plain number, else None."""
    if value is None:
        return None
    if isinstance(value, bool):
        return float(value)
    if isinstance(value, (int, float)):
        return float(value) if math.isfinite(value) else None
    text = str(value).strip()
    if not _NUMERIC.fullmatch(text):
        return None
    f = float(text.replace(",", ""))
    return f if math.isfinite(f) else None


class Similarity:
    """Cached text similarities under one embedding function; equal strings score exactly 1."""

    def __init__(self, embed: EmbedFn):
        self.embed = embed

    def matrix(self, a: Sequence[str], b: Sequence[str]) -> np.ndarray:
        if not a or not b:
            return np.zeros((len(a), len(b)))
        unique = list(dict.fromkeys(list(a) + list(b)))
        vecs = np.asarray(self.embed(unique), dtype=float)
        index = {t: i for i, t in enumerate(unique)}
        sims = similarity_matrix(vecs[[index[t] for t in a]], vecs[[index[t] for t in b]])
        for i, x in enumerate(a):
            for j, y in enumerate(b):
                if x == y:
                    sims[i, j] = 1.0
        return sims


@dataclass(frozen=True)
class PoolValue:
    value: Any
    column: str


def value_pool(table: DenormalizedTable) -> list[PoolValue]:
    """Non-null cells outside key columns, with their bare column names."""
    keys = set(table.key_columns)
    out = []
    for row in table.rows:
        for j, v in enumerate(row):
            if j in keys or value_text(v) is None:
                continue
            out.append(PoolValue(v, table.names[j]))
    return out


def _value_edges(gt: Sequence[Any], pred: Sequence[Any], config: MatchConfig, sim: Similarity) -> np.ndarray:
    """Boolean matrix: GT value i and predicted value j satisfy the numeric-or-text rule."""
    edges = np.zeros((len(gt), len(pred)), dtype=bool)
    if not gt or not pred:
        return edges
    gt_num = [numeric(v) for v in gt]
    pr_num = [numeric(v) for v in pred]
    gt_txt = [value_text(v) for v in gt]
    pr_txt = [value_text(v) for v in pred]
    sims = sim.matrix(gt_txt, pr_txt)
    for i in range(len(gt)):
        for j in range(len(pred)):
            if gt_num[i] is not None and pr_num[j] is not None:
                edges[i, j] = abs(gt_num[i] - pr_num[j]) < config.numeric_tolerance
            else:
                edges[i, j] = sims[i, j] > config.value_sim_threshold
    return edges


def max_matching(edges: np.ndarray) -> int:
    """Size of a maximum one-to-one matching in a boolean bipartite adjacency matrix."""
    if edges.size == 0 or not edges.any():
        return 0
    match = maximum_bipartite_matching(csr_matrix(edges.astype(np.int8)), perm_type="column")
    return int(np.count_nonzero(match >= 0))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def entity_coverage(gt_columns: Sequence[str], pred_columns: Sequence[str], embed: EmbedFn) -> float:
    """Mean over GT columns of the best cosine similarity to any predicted column, in [0, 1]."""
    gt = [humanize(c) for c in gt_columns]
    pred = [humanize(c) for c in pred_columns]
    if not gt:
        raise ValueError("entity coverage needs at least one ground-truth column")
    if not pred:
        return 0.0
    sims = Similarity(embed).matrix(gt, pred)
    return float(min(1.0, max(0.0, sims.max(axis=1).mean())))


def pk_coverage(schema: Schema) -> float:
    if not schema.tables:
        raise ValueError("primary-key coverage needs at least one table")
    return sum(1 for t in schema.tables if t.primary_key) / len(schema.tables)


def fk_coverage(schema: Schema) -> float:
    """Share of foreign keys that reference an existing primary-key column; 1.0 without FKs."""
    total = valid = 0
    for _, col in schema.foreign_keys():
        total += 1
        parent = schema.table(col.foreign_key.table_name)
        target = parent.column(col.foreign_key.column_name) if parent is not None else None
        valid += int(target is not None and target.is_primary_key)
    return 1.0 if total == 0 else valid / total


def db_success_rate(outcomes: Sequence[Outcome]) -> float:
    if not outcomes:
        raise ValueError("success rate needs at least one outcome")
    return sum(1 for o in outcomes if o.materialized and o.has_nonnull_tuple) / len(outcomes)


def ref_integrity(table: DenormalizedTable) -> float:
    """Mean non-null fraction per joined row. Raises EmptyJoin for a table without rows."""
    if not table.rows:
        raise EmptyJoin("the canonical join produced no rows")
    total = 0.0
    for row in table.rows:
        n = len(row)
        nulls = sum(1 for v in row if v is None)
        total += 1.0 - nulls / n if n else 0.0
    return total / len(table.rows)


def tuple_coverage(gt_keys: Sequence[Any], join_keys: Sequence[Any], config: MatchConfig | None = None,
                   embed: EmbedFn | None = None) -> float:
    """Share of distinct GT keys matched one-to-one by distinct joined keys under the value rule."""
    config = config or MatchConfig()
    gt = list(dict.fromkeys(k for k in gt_keys if value_text(k) is not None))
    pred = list(dict.fromkeys(k for k in join_keys if value_text(k) is not None))
    if not gt:
        raise ValueError("tuple coverage needs at least one ground-truth key")
    sim = Similarity(embed) if embed is not None else Similarity(_identity_embed)
    return max_matching(_value_edges(gt, pred, config, sim)) / len(gt)


def _identity_embed(texts: Sequence[str]) -> np.ndarray:
    index = {t: i for i, t in enumerate(dict.fromkeys(texts))}
    out = np.zeros((len(texts), max(1, len(index))))
    for i, t in enumerate(texts):
        out[i, index[t]] = 1.0
    return out


def _coverage(gt_table: DenormalizedTable, pred_table: DenormalizedTable, config: MatchConfig,
              embed: EmbedFn, by_column: bool) -> float:
    gt, pred = value_pool(gt_table), value_pool(pred_table)
    if not gt:
        return 1.0
    if not pred:
        return 0.0
    sim = Similarity(embed)
    edges = _value_edges([g.value for g in gt], [p.value for p in pred], config, sim)
    if by_column:
        gcols = [humanize(g.column) for g in gt]
        pcols = [humanize(p.column) for p in pred]
        ucols_g, ucols_p = list(dict.fromkeys(gcols)), list(dict.fromkeys(pcols))
        col_sims = sim.matrix(ucols_g, ucols_p)
        gi = {c: i for i, c in enumerate(ucols_g)}
        pi = {c: i for i, c in enumerate(ucols_p)}
        ok = col_sims[np.ix_([gi[c] for c in gcols], [pi[c] for c in pcols])] > config.column_sim_threshold
        edges &= ok
    return max_matching(edges) / len(gt)


def value_coverage(gt_table: DenormalizedTable, pred_table: DenormalizedTable, config: MatchConfig,
                   embed: EmbedFn) -> float:
    return _coverage(gt_table, pred_table, config, embed, by_column=False)


def column_consistency(gt_table: DenormalizedTable, pred_table: DenormalizedTable, config: MatchConfig,
                       embed: EmbedFn) -> float:
    return _coverage(gt_table, pred_table, config, embed, by_column=True)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    doc_id: str = ""
    dbr: float = 0.0
    ecs: float = 0.0
    pkc: float = 0.0
    fkc: float = 0.0
    rrir: float = 0.0
    tc: float = 0.0
    vc: float = 0.0
    cc: float = 0.0
    flags: list[str] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def to_obj(self) -> dict[str, Any]:
        obj = asdict(self)
        for m in METRICS:
            obj[m] = round(obj[m], 12) + 0.0
        return obj


def attribute_columns(table: DenormalizedTable) -> list[str]:
    keys = set(table.key_columns)
    return list(dict.fromkeys(n for j, n in enumerate(table.names) if j not in keys))


def evaluate_all(gt_table: DenormalizedTable, gen_table: DenormalizedTable | None, gen_schema: Schema | None,
                 outcomes: Sequence[Outcome], config: MatchConfig, embed: EmbedFn, doc_id: str = "") -> MetricReport:
    """All eight metrics for one generated database against its ground truth.

    A failed generation (no table, or an outcome that did not materialize) scores zero
    on the tuple metrics; schema metrics are still computed when a schema exists.
    """
    report = MetricReport(doc_id=doc_id)
    report.dbr = db_success_rate(outcomes) if outcomes else 0.0
    if gen_schema is not None and gen_schema.tables:
        report.pkc = pk_coverage(gen_schema)
        report.fkc = fk_coverage(gen_schema)
        if not any(True for _ in gen_schema.foreign_keys()):
            report.flags.append("no_foreign_keys")
        gt_cols = attribute_columns(gt_table)
        pred_cols = attribute_columns(gen_table) if gen_table is not None else \
            [c.name for t in gen_schema.tables for c in t.columns if not c.is_primary_key and c.foreign_key is None]
        if gt_cols:
            report.ecs = entity_coverage(gt_cols, pred_cols, embed)
    else:
        report.flags.append("no_schema")
    failed = gen_table is None or not all(o.materialized for o in outcomes)
    if failed:
        report.flags.append("generation_failed")
        return report
    try:
        report.rrir = ref_integrity(gen_table)
    except EmptyJoin:
        report.flags.append("empty_join")
        report.rrir = 0.0
    gt_keys = gt_table.keys()
    if gt_keys and any(value_text(k) is not None for k in gt_keys):
        report.tc = tuple_coverage(gt_keys, gen_table.keys(), config, embed)
    report.vc = value_coverage(gt_table, gen_table, config, embed)
    report.cc = column_consistency(gt_table, gen_table, config, embed)
    return report


@dataclass
class CorpusReport:
    documents: list[MetricReport]
    aggregate: MetricReport

    def to_obj(self) -> dict[str, Any]:
        return {"documents": [d.to_obj() for d in self.documents], "corpus": self.aggregate.to_obj()}

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        header = ["document"] + [m.upper() for m in METRICS]
        rows = [[d.doc_id] + [f"{getattr(d, m):.4f}" for m in METRICS] for d in self.documents]
        rows.append(["corpus"] + [f"{getattr(self.aggregate, m):.4f}" for m in METRICS])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        rule = "  ".join("-" * w for w in widths)
        return "\n".join([fmt(header), rule] + [fmt(r) for r in rows[:-1]] + [rule, fmt(rows[-1])]) + "\n"


def aggregate(reports: Sequence[MetricReport], outcomes: Sequence[Outcome] | None = None) -> CorpusReport:
    """Corpus means of the per-document metrics; DBR is computed over all outcomes."""
    agg = MetricReport(doc_id="corpus")
    if reports:
        for m in METRICS:
            setattr(agg, m, sum(getattr(r, m) for r in reports) / len(reports))
    if outcomes:
        agg.dbr = db_success_rate(outcomes)
    return CorpusReport(list(reports), agg)
