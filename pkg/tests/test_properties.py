from __future__ import annotations

import random

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from generators import random_records, random_schema, raw_rows, rows_to_records
from text2db.datagen import build_documents
from text2db.evaluate import column_consistency, entity_coverage, value_coverage
from text2db.gateway import ExactMatchEmbedder, HashingEmbedder, similarity_matrix
from text2db.materialize import denormalize, emit_create_tables, emit_inserts, execute
from text2db.model import MatchConfig, canonical_join_plan, schema_from_text, schema_to_text, validate_schema
from text2db.population import RecordSet, SourceKind, ensemble_merge, normalize_records, parse_extract_records
from text2db.values import SymbolicTriplet, deduplicate, render_text

seeds = st.integers(min_value=0, max_value=2**32 - 1)
fast = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
CFG = MatchConfig()


def _materialize(schema, records):
    return execute(emit_create_tables(schema) + emit_inserts(schema, records))


@fast
@given(seeds)
def test_schema_text_round_trip(seed):
    schema = random_schema(random.Random(seed)).schema
    assert schema_from_text(schema_to_text(schema)) == schema


@fast
@given(seeds)
def test_generated_schemas_validate_repeatably(seed):
    schema = random_schema(random.Random(seed)).schema
    first, second = validate_schema(schema), validate_schema(schema)
    assert first.ok and first == second


@fast
@given(seeds)
def test_join_plan_spans_the_tree(seed):
    schema = random_schema(random.Random(seed)).schema
    plan = canonical_join_plan(schema)
    assert len(plan.steps) == len(schema.tables) - 1
    assert sorted(plan.tables()) == sorted(t.name for t in schema.tables)


@fast
@given(seeds)
def test_outer_join_keeps_every_central_row(seed):
    rng = random.Random(seed)
    tree = random_schema(rng, max_tables=3)
    rows = raw_rows(rng, tree)
    schema = tree.schema
    with _materialize(schema, rows_to_records(schema, rows)) as handle:
        table = denormalize(handle, schema, canonical_join_plan(schema))
    central = rows[schema.central.name]
    assert table.n_rows >= len(central)
    assert sorted(set(table.keys())) == sorted(r[schema.central.primary_key[0]] for r in central)


@fast
@given(seeds)
def test_emission_is_deterministic(seed):
    rng = random.Random(seed)
    schema = random_schema(rng).schema
    records = random_records(rng, schema, rng.randint(1, 4))
    assert emit_inserts(schema, records) == emit_inserts(schema, list(records))
    assert emit_create_tables(schema) == emit_create_tables(schema)


@fast
@given(seeds)
def test_coverage_bounds(seed):
    rng = random.Random(seed)
    trees = [random_schema(rng, max_tables=3) for _ in range(2)]
    tables = []
    for tree in trees:
        with _materialize(tree.schema, rows_to_records(tree.schema, raw_rows(rng, tree))) as handle:
            tables.append(denormalize(handle, tree.schema, canonical_join_plan(tree.schema)))
    emb = ExactMatchEmbedder()
    vc = value_coverage(tables[0], tables[1], CFG, emb)
    cc = column_consistency(tables[0], tables[1], CFG, emb)
    assert 0.0 <= cc <= vc <= 1.0


@fast
@given(st.lists(st.sampled_from(["name", "age", "start date", "city", "price", "hotel"]), min_size=1, max_size=5,
                unique=True), st.lists(st.sampled_from(["name", "age", "city", "notes"]), max_size=4), seeds)
def test_entity_coverage_ignores_column_order(gt, gen, seed):
    emb = ExactMatchEmbedder()
    shuffled = list(gen)
    random.Random(seed).shuffle(shuffled)
    score = entity_coverage(gt, gen, emb)
    assert 0.0 <= score <= 1.0
    assert score == entity_coverage(gt, shuffled, emb)


words = st.sampled_from(["Sophia", "sophia", "Rome", "rome ", "June 10th", "premium", "tour", "James", "29"])
triplets = st.lists(st.builds(SymbolicTriplet, words, words, words, st.integers(0, 2)), max_size=12)


@fast
@given(triplets)
def test_dedup_invariants(items):
    embed = HashingEmbedder()
    out = deduplicate(items, 0.97, embed)
    assert all(t in items for t in out)
    assert deduplicate(out, 0.97, embed) == out
    assert len(out) <= len(items)
    if len(out) > 1:
        vecs = embed([render_text(t) for t in out])
        sims = similarity_matrix(vecs, vecs)
        np.fill_diagonal(sims, 0.0)
        assert sims.max() < 0.97


@fast
@given(st.text(max_size=300))
def test_extract_parser_never_raises(raw):
    schema = random_schema(random.Random(7)).schema
    records = parse_extract_records(raw, schema)
    names = {t.name for t in schema.tables}
    assert all(r.table_name in names for r in records)


@fast
@given(seeds)
def test_merge_is_idempotent(seed):
    rng = random.Random(seed)
    schema = random_schema(rng).schema
    records = random_records(rng, schema, rng.randint(1, 4), fill=0.6)
    merged = ensemble_merge([RecordSet(SourceKind.T, tuple(records))], schema)
    again = ensemble_merge([RecordSet(SourceKind.T, tuple(merged)), RecordSet(SourceKind.L, tuple(merged))], schema)
    assert again == merged == normalize_records(records, schema)


@fast
@given(st.lists(st.text("abc .", min_size=1, max_size=10).map(str.strip).filter(bool), max_size=40), st.integers(1, 8))
def test_documents_partition_sentences(sentences, size):
    docs = build_documents(sentences, size)
    assert [p for d in docs for p in d.paragraphs] == sentences
    assert all(len(d.paragraphs) == size for d in docs[:-1])
    assert len({d.doc_id for d in docs}) == len(docs)


@fast
@given(seeds)
def test_populated_database_has_content(seed):
    rng = random.Random(seed)
    schema = random_schema(rng).schema
    records = random_records(rng, schema, rng.randint(1, 3))
    with _materialize(schema, records) as handle:
        assert handle.has_nonnull_tuple(schema)
        assert handle.row_count() == len(records)
