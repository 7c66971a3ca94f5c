"""Regenerate the tourism fixture corpus and its recorded transcripts.

The completion and annotation backends here are scripted: each reply is written
by hand for the paragraph it answers, then recorded through the gateway exactly
as a live run would be. Run from the repository root:

    python tests/fixtures/build_tourism.py
"""

from __future__ import annotations

import json
import re
import shutil
import sqlite3
import sys
import tempfile
from pathlib import Path

from text2db.baseline import run_baseline
from text2db.config import load_config
from text2db.corpus import load_corpus
from text2db.gateway import CompletionRequest, Gateway, HashingEmbedder, Transcript
from text2db.pipeline import PipelineOptions, run_pipeline

ROOT = Path(__file__).resolve().parent / "tourism"

TRAVELERS = [
    dict(name="Maria Lopez", age=34, nationality="Spanish", pronoun="She", city="Kyoto", country="Japan",
         start_date="2024-04-02", duration_days=5, hotel_name="Hotel Sakura", nightly_rate=180, mode="train",
         cost=95),
    dict(name="Tom Becker", age=41, nationality="German", pronoun="He", city="Lisbon", country="Portugal",
         start_date="2024-06-15", duration_days=7, hotel_name="Casa Azul", nightly_rate=120, mode="plane",
         cost=240),
    dict(name="Aisha Khan", age=28, nationality="Canadian", pronoun="She", city="Reykjavik", country="Iceland",
         start_date="2024-09-10", duration_days=4, hotel_name="Northern Lodge", nightly_rate=210, mode="plane",
         cost=410),
    dict(name="Liam Walsh", age=52, nationality="Irish", pronoun="He", city="Rome", country="Italy",
         start_date="2024-10-05", duration_days=6, hotel_name="Villa Roma", nightly_rate=150, mode="bus",
         cost=60),
]
DOCS = [("doc_001", [0, 1]), ("doc_002", [2, 3])]

PARAGRAPH = ("{name}, a {age}-year-old {nationality} traveler, booked a {duration_days}-day trip to {city}, "
             "{country} starting on {start_date}. {pronoun} stayed at {hotel_name} for {nightly_rate} dollars "
             "per night and traveled by {mode} for {cost} dollars.")


def paragraph(t: dict) -> str:
    return PARAGRAPH.format(**t)


# --------------------------------------------------------------------------
# Ground truth
# --------------------------------------------------------------------------

GT_DDL = """
CREATE TABLE traveler (traveler_id INTEGER PRIMARY KEY, name TEXT, age INTEGER, nationality TEXT);
CREATE TABLE destination (destination_id INTEGER PRIMARY KEY, city TEXT, country TEXT);
CREATE TABLE trip (trip_id INTEGER PRIMARY KEY, traveler_id INTEGER REFERENCES traveler (traveler_id),
    destination_id INTEGER REFERENCES destination (destination_id), start_date DATE, duration_days INTEGER);
CREATE TABLE accommodation (accommodation_id INTEGER PRIMARY KEY, trip_id INTEGER REFERENCES trip (trip_id),
    hotel_name TEXT, nightly_rate REAL);
CREATE TABLE transportation (transportation_id INTEGER PRIMARY KEY, trip_id INTEGER REFERENCES trip (trip_id),
    mode TEXT, cost REAL);
"""


def write_ground_truth(path: Path) -> None:
    path.unlink(missing_ok=True)
    con = sqlite3.connect(path)
    con.executescript(GT_DDL)
    for i, t in enumerate(TRAVELERS, 1):
        con.execute("INSERT INTO traveler VALUES (?, ?, ?, ?)", (i, t["name"], t["age"], t["nationality"]))
        con.execute("INSERT INTO destination VALUES (?, ?, ?)", (10 + i, t["city"], t["country"]))
        con.execute("INSERT INTO trip VALUES (?, ?, ?, ?, ?)",
                    (100 + i, i, 10 + i, t["start_date"], t["duration_days"]))
        con.execute("INSERT INTO accommodation VALUES (?, ?, ?, ?)",
                    (200 + i, 100 + i, t["hotel_name"], float(t["nightly_rate"])))
        con.execute("INSERT INTO transportation VALUES (?, ?, ?, ?)", (300 + i, 100 + i, t["mode"], float(t["cost"])))
    con.commit()
    con.close()


def write_corpus() -> None:
    (ROOT / "documents").mkdir(parents=True, exist_ok=True)
    write_ground_truth(ROOT / "ground_truth.sqlite")
    entries = []
    for doc_id, rows in DOCS:
        text = "\n\n".join(paragraph(TRAVELERS[i]) for i in rows) + "\n"
        (ROOT / "documents" / f"{doc_id}.txt").write_text(text, encoding="utf-8")
        entries.append({"file": f"documents/{doc_id}.txt", "difficulty": "easy", "gt_rows": rows})
    manifest = {"domain": "tourism", "central_table": "traveler", "documents": entries}
    (ROOT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (ROOT / "config.yaml").write_text(
        "# Offline configuration for replaying the recorded transcripts.\n"
        "embedding:\n  backend: hashing\npipeline:\n  workers: 2\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Scripted backends
# --------------------------------------------------------------------------

SCHEMA_REPLY = """schema = [
    {
        "table_name": "traveler",
        "columns": [
            {"name": "traveler_id", "type": "INTEGER", "primary_key": True},
            {"name": "name", "type": "TEXT"},
            {"name": "age", "type": "INTEGER"},
            {"name": "nationality", "type": "TEXT"},
        ]
    },
    {
        "table_name": "destination",
        "columns": [
            {"name": "destination_id", "type": "INTEGER", "primary_key": True},
            {"name": "city", "type": "TEXT"},
            {"name": "country", "type": "TEXT"},
        ]
    },
    {
        "table_name": "trip",
        "columns": [
            {"name": "trip_id", "type": "INTEGER", "primary_key": True},
            {"name": "traveler_id", "type": "INTEGER", "foreign_key": True, "foreign_key_table": "traveler", "foreign_key_column": "traveler_id"},
            {"name": "destination_id", "type": "INTEGER", "foreign_key": True, "foreign_key_table": "destination", "foreign_key_column": "destination_id"},
            {"name": "start_date", "type": "DATE"},
            {"name": "duration_days", "type": "INTEGER"},
        ]
    },
    {
        "table_name": "accommodation",
        "columns": [
            {"name": "accommodation_id", "type": "INTEGER", "primary_key": True},
            {"name": "trip_id", "type": "INTEGER", "foreign_key": True, "foreign_key_table": "trip", "foreign_key_column": "trip_id"},
            {"name": "hotel_name", "type": "TEXT"},
            {"name": "nightly_rate", "type": "REAL"},
        ]
    },
    {
        "table_name": "transportation",
        "columns": [
            {"name": "transportation_id", "type": "INTEGER", "primary_key": True},
            {"name": "trip_id", "type": "INTEGER", "foreign_key": True, "foreign_key_table": "trip", "foreign_key_column": "trip_id"},
            {"name": "mode", "type": "TEXT"},
            {"name": "cost", "type": "REAL"},
        ]
    }
]"""

FIELDS = [("traveler", "name"), ("traveler", "age"), ("traveler", "nationality"), ("destination", "city"),
          ("destination", "country"), ("trip", "start_date"), ("trip", "duration_days"),
          ("accommodation", "hotel_name"), ("accommodation", "nightly_rate"), ("transportation", "mode"),
          ("transportation", "cost")]


def aligned_reply(t: dict, omit: tuple[str, ...] = ()) -> str:
    items = [{"table_name": tab, "column_name": col, "value": t[col]} for tab, col in FIELDS if col not in omit]
    return "Triplets: " + json.dumps(items, indent=1)


def extract_reply(travelers: list[tuple[int, dict]], gaps: dict[int, tuple[str, ...]]) -> str:
    def v(ident: int, t: dict, col: str) -> str:
        if col in gaps.get(ident, ()):
            return "'?'"
        return json.dumps(t[col])

    lines = []
    for ident, t in travelers:
        lines.append(f'extract traveler: "traveler_id": {ident}; "name": {v(ident, t, "name")}; '
                     f'"age": {v(ident, t, "age")}; "nationality": {v(ident, t, "nationality")}')
        lines.append(f'extract destination: "destination_id": {ident}; "city": {v(ident, t, "city")}; '
                     f'"country": {v(ident, t, "country")}')
        lines.append(f'extract trip: "trip_id": {ident}; "traveler_id": {ident}; "destination_id": {ident}; '
                     f'"start_date": {v(ident, t, "start_date")}; "duration_days": {v(ident, t, "duration_days")}')
        lines.append(f'extract accommodation: "accommodation_id": {ident}; "trip_id": {ident}; '
                     f'"hotel_name": {v(ident, t, "hotel_name")}; "nightly_rate": {v(ident, t, "nightly_rate")}')
        lines.append(f'extract transportation: "transportation_id": {ident}; "trip_id": {ident}; '
                     f'"mode": {v(ident, t, "mode")}; "cost": {v(ident, t, "cost")}')
    return "\n".join(lines)


def mentioned(user_prompt: str) -> list[dict]:
    # The traveler paragraphs quoted in the prompt (the schema example never names them).
    return [t for t in TRAVELERS if t["name"] in user_prompt]


def pipeline_completer(request: CompletionRequest) -> str:
    tag = request.tag.split("#", 1)[0]
    found = mentioned(request.user_prompt)
    numbered = list(enumerate(found, 1))
    if tag == "schema.direct":
        return SCHEMA_REPLY
    if tag == "identifiers":
        return "\n".join(f"paragraph {j}: ...\nassociated superkey: {t['name']}\n--" for j, t in enumerate(found))
    if tag == "triplets.aligned":
        # The first reply misses the transportation cost; augmentation recovers it.
        return aligned_reply(found[0], omit=("cost",))
    if tag == "triplets.augment":
        return aligned_reply(found[0])
    if tag == "populate.t":
        # Direct extraction leaves gaps in the second entity that the other sources fill.
        return extract_reply(numbered, {2: ("nightly_rate", "mode")})
    if tag == "populate.s":
        return extract_reply(numbered, {1: ("cost",), 2: ("nightly_rate",)})
    if tag == "populate.l":
        return extract_reply(numbered, {})
    raise KeyError(f"no scripted reply for {request.tag}")


_TOKEN = re.compile(r"\d{4}-\d{2}-\d{2}|[\w-]+|[.,]")
_NOUNS = {"traveler": "NN", "trip": "NN", "night": "NN", "dollars": "NNS"}


def _pos(token: str) -> str:
    if token in ".,":
        return token
    if re.fullmatch(r"\d+|\d{4}-\d{2}-\d{2}", token):
        return "CD"
    if token in ("She", "He"):
        return "PRP"
    if token in _NOUNS:
        return _NOUNS[token]
    if re.search(r"\d", token):
        return "JJ"
    if token[0].isupper() and token not in ("Spanish", "German", "Canadian", "Irish"):
        return "NNP"
    if token in ("Spanish", "German", "Canadian", "Irish"):
        return "JJ"
    return {"a": "DT", "to": "TO", "at": "IN", "for": "IN", "per": "IN", "by": "IN", "on": "IN",
            "and": "CC"}.get(token, "VBD")


def annotator(text: str) -> dict:
    t = next(t for t in TRAVELERS if t["name"] in text)
    sentences = []
    for k, sent in enumerate(re.split(r"(?<=\.)\s+", text.strip())):
        tokens = [{"index": i + 1, "word": w, "originalText": w, "pos": _pos(w)}
                  for i, w in enumerate(_TOKEN.findall(sent))]
        if k == 0:
            openie = [
                {"subject": t["name"], "relation": "is", "object": f"{t['age']}-year-old {t['nationality']} traveler"},
                {"subject": t["name"], "relation": "booked", "object": f"{t['duration_days']}-day trip"},
                {"subject": f"{t['duration_days']}-day trip", "relation": "to", "object": f"{t['city']} {t['country']}"},
                {"subject": "trip", "relation": "starting on", "object": t["start_date"]},
            ]
        else:
            openie = [
                {"subject": t["pronoun"], "relation": "stayed at", "object": t["hotel_name"]},
                {"subject": t["pronoun"], "relation": "stayed for", "object": f"{t['nightly_rate']} dollars per night"},
                {"subject": t["pronoun"], "relation": "traveled by", "object": t["mode"]},
                {"subject": t["pronoun"], "relation": "traveled for", "object": f"{t['cost']} dollars"},
            ]
        sentences.append({"index": k, "tokens": tokens, "openie": openie})
    return {"sentences": sentences}


BASELINE_SQL_OK = """```sql
CREATE TABLE traveler (
    traveler_id INTEGER PRIMARY KEY,
    name TEXT,
    age INTEGER,
    nationality TEXT
);
CREATE TABLE trip (
    trip_id INTEGER PRIMARY KEY,
    traveler_id INTEGER,
    destination TEXT,
    start_date TEXT,
    duration_days INTEGER,
    hotel_name TEXT,
    nightly_rate REAL,
    transport_mode TEXT,
    transport_cost REAL,
    FOREIGN KEY (traveler_id) REFERENCES traveler(traveler_id)
);
INSERT INTO traveler VALUES (1, 'Maria Lopez', 34, 'Spanish');
INSERT INTO traveler VALUES (2, 'Tom Becker', 41, 'German');
INSERT INTO trip VALUES (1, 1, 'Kyoto, Japan', '2024-04-02', 5, 'Hotel Sakura', 180, 'train', 95);
INSERT INTO trip VALUES (2, 2, 'Lisbon, Portugal', '2024-06-15', 7, 'Casa Azul', 120, 'plane', 240);
```"""

BASELINE_JOIN_OK = """```sql
SELECT traveler.traveler_id, traveler.name, traveler.age, traveler.nationality, trip.trip_id,
       trip.destination, trip.start_date, trip.duration_days, trip.hotel_name, trip.nightly_rate,
       trip.transport_mode, trip.transport_cost
FROM traveler
LEFT JOIN trip ON trip.traveler_id = traveler.traveler_id;
```"""

# Unbalanced parenthesis and a missing comma: SQLite rejects the first statement.
BASELINE_SQL_BROKEN = """```sql
CREATE TABLE traveler (
    traveler_id INTEGER PRIMARY KEY,
    name TEXT
    age INTEGER,
    nationality TEXT;
INSERT INTO traveler VALUES (1, 'Aisha Khan', 28, 'Canadian');
INSERT INTO traveler VALUES (2, 'Liam Walsh', 52, 'Irish');
```"""


def baseline_completer(request: CompletionRequest) -> str:
    if request.tag == "baseline.sql":
        return BASELINE_SQL_OK if "Maria Lopez" in request.user_prompt else BASELINE_SQL_BROKEN
    if request.tag == "baseline.join":
        return BASELINE_JOIN_OK
    raise KeyError(f"no scripted reply for {request.tag}")


# --------------------------------------------------------------------------
# Recording
# --------------------------------------------------------------------------

def record(kind: str) -> Path:
    config = load_config(ROOT / "config.yaml", environment={})
    path = ROOT / "transcripts" / f"{kind}.jsonl"
    path.unlink(missing_ok=True)
    embedders = {config.embedding.dedup_model: HashingEmbedder(), config.embedding.match_model: HashingEmbedder()}
    completer = pipeline_completer if kind == "pipeline" else baseline_completer
    gateway = Gateway(completer, embedders, annotator if kind == "pipeline" else None, Transcript(path),
                      mode="record")
    corpus = load_corpus(ROOT)
    with tempfile.TemporaryDirectory() as out:
        if kind == "pipeline":
            options = PipelineOptions.from_config(config)
            result = run_pipeline(corpus, gateway, PipelineOptions(**{**options.__dict__, "workers": 1}), out)
        else:
            result = run_baseline(corpus, gateway, out, config.match.to_match_config(),
                                  config.embedding.match_model)
        print(f"{kind}: {gateway.calls} calls recorded", file=sys.stderr)
        print(result.report.to_text(), file=sys.stderr)
    return path


def main() -> None:
    if (ROOT / "transcripts").exists():
        shutil.rmtree(ROOT / "transcripts")
    write_corpus()
    record("pipeline")
    record("baseline")


if __name__ == "__main__":
    main()
