"""Value identification: symbolic and schema-aligned triplets, coverage augmentation,
near-duplicate removal, and per-paragraph entity identifiers."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from . import prompts
from .gateway import BackendUnavailable, CompletionRequest, Gateway, ReplayMiss, cos_sim
from .literal import find_list_of_dicts
from .model import Document, Schema, schema_to_text
from .schema_gen import ParseFailure

log = logging.getLogger(__name__)

NOT_PRESENT = ("not mentioned", "not provided")
COVERAGE_TAGS = frozenset({"NN", "NNS", "NNP", "NNPS", "PRP", "PRP$", "WP", "WP$", "CD"})
RENDER_DELIMITER = " | "


@dataclass(frozen=True)
class SymbolicTriplet:
    subject: str
    relation: str
    object: str
    paragraph: int = field(default=0, compare=False)

    def fields(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)


@dataclass(frozen=True)
class AlignedTriplet:
    table_name: str
    column_name: str
    value: str
    paragraph: int = field(default=0, compare=False)

    def fields(self) -> tuple[str, str, str]:
        return (self.table_name, self.column_name, self.value)


Triplet = Union[SymbolicTriplet, AlignedTriplet]


def render_text(triplet: Triplet) -> str:
    """Text that gets embedded for near-duplicate detection."""
    return RENDER_DELIMITER.join(triplet.fields())


@dataclass(frozen=True)
class GroupedTriplet:
    identifier: int
    payload: Triplet

    def render(self) -> str:
        a, b, c = self.payload.fields()
        return f"<{self.identifier}, {a}, {b}, {c}>"


@dataclass(frozen=True)
class ParagraphAssignment:
    """Identifier per paragraph (position = paragraph index), always 1..N.

    ``labels`` keeps the superkey values the model proposed, when they were usable.
    """

    identifiers: tuple[int, ...]
    labels: tuple[str, ...] = ()
    fallback: bool = True

    def __post_init__(self) -> None:
        if len(set(self.identifiers)) != len(self.identifiers):
            raise ValueError("paragraph identifiers must be unique")
        if any(i < 1 for i in self.identifiers):
            raise ValueError("paragraph identifiers must be >= 1")

    @classmethod
    def sequential(cls, n: int) -> ParagraphAssignment:
        return cls(tuple(range(1, n + 1)))

    def __getitem__(self, paragraph: int) -> int:
        if paragraph < 0:
            raise IndexError(paragraph)
        return self.identifiers[paragraph]

    def __len__(self) -> int:
        return len(self.identifiers)

    def as_dict(self) -> dict[int, int]:
        return dict(enumerate(self.identifiers))

    def to_obj(self) -> dict:
        return {"identifiers": list(self.identifiers), "labels": list(self.labels), "fallback": self.fallback}


class UnassignedParagraph(KeyError):
    pass


# --------------------------------------------------------------------------
# Symbolic extraction
# --------------------------------------------------------------------------

def extract_symbolic_triplets(document: Document, gateway: Gateway) -> list[SymbolicTriplet]:
    """Annotation-service triplets for every paragraph, in document order."""
    out: list[SymbolicTriplet] = []
    for idx, paragraph in enumerate(document.paragraphs):
        ann = gateway.annotate_symbolic(paragraph)
        for subj, rel, obj in ann.triplets:
            if subj and rel and obj:
                out.append(SymbolicTriplet(subj, rel, obj, idx))
    return out


# --------------------------------------------------------------------------
# Schema-aligned extraction
# --------------------------------------------------------------------------

def _example(name: str) -> str:
    return prompts.load(name).rstrip("\n")


def build_aligned_prompt(paragraph: str, schema: Schema) -> CompletionRequest:
    user = prompts.render(
        "triplet_user",
        example_schema=_example("triplet_example_schema"),
        example_text=_example("triplet_example_text"),
        example_output=_example("triplet_example_output"),
        schema=schema_to_text(schema).rstrip("\n"),
        text=paragraph,
    )
    return CompletionRequest(prompts.load("triplet_system"), user, 0.0, tag="triplets.aligned")


def _schema_lookup(schema: Schema) -> dict[tuple[str, str], tuple[str, str]]:
    return {(t.name.casefold(), c.name.casefold()): (t.name, c.name) for t in schema.tables for c in t.columns}


def _value_text(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value).strip()


def parse_aligned_response(raw: str, schema: Schema, paragraph: int = 0) -> tuple[list[AlignedTriplet], int]:
    """Triplets from a model reply plus the number dropped as off-schema.

    Raises ParseFailure when the reply holds no list of dictionaries at all.
    """
    items = find_list_of_dicts(raw)
    if items is None:
        raise ParseFailure("no list of triplet dictionaries found", len(raw.encode("utf-8")))
    lookup = _schema_lookup(schema)
    out, off_schema = [], 0
    for item in items:
        table = item.get("table_name", item.get("table"))
        column = item.get("column_name", item.get("column"))
        value = item.get("value")
        if value is None or table is None or column is None:
            continue
        text = _value_text(value)
        if not text or text.casefold() in NOT_PRESENT:
            continue
        key = (str(table).strip().casefold(), str(column).strip().casefold())
        if key not in lookup:
            off_schema += 1
            log.warning("dropping off-schema triplet (%s, %s, %s)", table, column, text)
            continue
        t, c = lookup[key]
        out.append(AlignedTriplet(t, c, text, paragraph))
    return out, off_schema


def _complete_list(gateway: Gateway, request: CompletionRequest, schema: Schema, paragraph: int,
                   max_retries: int) -> list[AlignedTriplet]:
    last: ParseFailure | None = None
    for attempt in range(1, max_retries + 2):
        raw = gateway.complete(request.retry(attempt))
        try:
            return parse_aligned_response(raw, schema, paragraph)[0]
        except ParseFailure as exc:
            last = exc
            log.warning("%s reply unparseable (attempt %d): %s", request.tag, attempt, exc)
    raise last


def extract_aligned_triplets(document: Document, schema: Schema, gateway: Gateway,
                             max_retries: int = 1) -> list[AlignedTriplet]:
    """Model-extracted (table, column, value) triplets, one request per paragraph."""
    out: list[AlignedTriplet] = []
    for idx, paragraph in enumerate(document.paragraphs):
        if not paragraph.strip():
            continue
        out.extend(_complete_list(gateway, build_aligned_prompt(paragraph, schema), schema, idx, max_retries))
    return out


# --------------------------------------------------------------------------
# POS coverage and augmentation
# --------------------------------------------------------------------------

def coverage_gap(pos_tags: Iterable[tuple[str, str]], triplets: Iterable[Triplet]) -> list[str]:
    """Noun, pronoun and numeral tokens not contained in any triplet field (case-insensitive)."""
    haystack = [f.casefold() for t in triplets for f in t.fields()]
    missing: list[str] = []
    seen: set[str] = set()
    for token, tag in pos_tags:
        if tag not in COVERAGE_TAGS or not token.strip():
            continue
        key = token.casefold()
        if key in seen:
            continue
        seen.add(key)
        if not any(key in field_text for field_text in haystack):
            missing.append(token)
    return missing


def pos_coverage_gap(document: Document, triplets: Sequence[Triplet], gateway: Gateway) -> list[str]:
    """Coverage gap over the whole document; each token reported once, in order of appearance."""
    tags = [tag for p in document.paragraphs for tag in gateway.annotate_symbolic(p).pos_tags]
    return coverage_gap(tags, triplets)


def _render_existing(triplets: Sequence[AlignedTriplet]) -> str:
    return json.dumps([{"table_name": t.table_name, "column_name": t.column_name, "value": t.value}
                       for t in triplets], ensure_ascii=False)


def build_augment_prompt(paragraph: str, schema: Schema, existing: Sequence[AlignedTriplet],
                         missing: Sequence[str]) -> CompletionRequest:
    user = prompts.render("augment_user", schema=schema_to_text(schema).rstrip("\n"), text=paragraph,
                          triplets=_render_existing(existing), missing=", ".join(missing))
    return CompletionRequest(prompts.load("triplet_system"), user, 0.0, tag="triplets.augment")


def augment_triplets(document: Document, schema: Schema, triplets: Sequence[AlignedTriplet],
                     missing: Sequence[str], gateway: Gateway) -> list[AlignedTriplet]:
    """Ask the model to cover ``missing`` tokens; the result always contains the input triplets."""
    result = list(triplets)
    if not missing:
        return result
    wanted = {m.casefold() for m in missing}
    for idx, paragraph in enumerate(document.paragraphs):
        own = [t for t in triplets if t.paragraph == idx]
        tags = gateway.annotate_symbolic(paragraph).pos_tags
        gap = [tok for tok in coverage_gap(tags, own) if tok.casefold() in wanted]
        if not gap:
            continue
        try:
            raw = gateway.complete(build_augment_prompt(paragraph, schema, own, gap))
            extra, _ = parse_aligned_response(raw, schema, idx)
        except ParseFailure as exc:
            log.warning("augmentation skipped for paragraph %d: %s", idx, exc)
            continue
        known = set(own)
        for t in extra:
            if t not in known:
                known.add(t)
                result.append(t)
        still = [tok for tok in coverage_gap(tags, [t for t in result if t.paragraph == idx])
                 if tok.casefold() in wanted]
        if still:
            log.info("paragraph %d still misses %s after augmentation", idx, ", ".join(still))
    return result


# --------------------------------------------------------------------------
# Deduplication
# --------------------------------------------------------------------------

EmbedFn = Callable[[Sequence[str]], np.ndarray]


def deduplicate(triplets: Sequence[Triplet], dedup_threshold: float, embed: EmbedFn) -> list[Triplet]:
    """Greedy first-wins removal of triplets whose rendering is a near duplicate.

    A triplet is dropped iff its embedding has cosine similarity >= ``dedup_threshold``
    with a triplet already retained.
    """
    if not 0 < dedup_threshold <= 1:
        raise ValueError(f"dedup_threshold must be in (0, 1], got {dedup_threshold}")
    if not triplets:
        return []
    vectors = np.asarray(embed([render_text(t) for t in triplets]), dtype=float)
    kept: list[int] = []
    for i in range(len(triplets)):
        if all(cos_sim(vectors[i], vectors[j]) < dedup_threshold for j in kept):
            kept.append(i)
    return [triplets[i] for i in kept]


def deduplicate_by_paragraph(triplets: Sequence[Triplet], dedup_threshold: float, embed: EmbedFn) -> list[Triplet]:
    """Run :func:`deduplicate` within each paragraph, keeping the overall order."""
    groups: dict[int, list[int]] = {}
    for i, t in enumerate(triplets):
        groups.setdefault(t.paragraph, []).append(i)
    keep: set[int] = set()
    for idxs in groups.values():
        # Dedup over positions so repeated objects are told apart.
        tagged = [_Positioned(i, triplets[i]) for i in idxs]
        keep.update(p.index for p in deduplicate(tagged, dedup_threshold, embed))
    return [t for i, t in enumerate(triplets) if i in keep]


@dataclass(frozen=True)
class _Positioned:
    index: int
    inner: Triplet

    def fields(self) -> tuple[str, str, str]:
        return self.inner.fields()


# --------------------------------------------------------------------------
# Identifiers and grouping
# --------------------------------------------------------------------------

def superkey_name(schema: Schema) -> str:
    central = schema.central
    pk = central.primary_key[0] if central.primary_key else "id"
    return f"{central.name}.{pk}"


def build_identifier_prompt(document: Document, schema: Schema) -> CompletionRequest:
    superkey = superkey_name(schema)
    user = prompts.render("identifier_user", text=document.text, schema=schema_to_text(schema).rstrip("\n"),
                          superkey=superkey)
    user += "\n--\n"
    for j, paragraph in enumerate(document.paragraphs):
        user += f"paragraph {j}: {paragraph}\n"
        user += f"associated superkey: <FILL IN WITH APPROPRIATE VALUE OF {superkey}>\n"
        user += "\n--\n"
    return CompletionRequest(prompts.render("identifier_system", superkey=superkey), user, 0.0,
                             tag="identifiers")


_SUPERKEY_LINE = re.compile(r"associated superkey\s*:\s*(.*)", re.IGNORECASE)


def parse_identifier_labels(raw: str) -> list[str]:
    labels = []
    for line in raw.splitlines():
        m = _SUPERKEY_LINE.search(line)
        if m:
            labels.append(m.group(1).strip().strip("<>\"'` *").strip())
    return labels


def assign_identifiers(document: Document, schema: Schema, gateway: Gateway) -> ParagraphAssignment:
    """Identifiers 1..N in paragraph order; the model's superkey values are kept as labels."""
    n = len(document.paragraphs)
    if n == 1:
        return ParagraphAssignment((1,), (), fallback=False)
    try:
        raw = gateway.complete(build_identifier_prompt(document, schema))
    except (BackendUnavailable, ReplayMiss) as exc:
        log.warning("identifier assignment fell back to paragraph order: %s", exc)
        return ParagraphAssignment.sequential(n)
    labels = parse_identifier_labels(raw)
    usable = (len(labels) == n and all(labels) and len({l.casefold() for l in labels}) == n
              and not any("FILL IN" in l.upper() for l in labels))
    if not usable:
        log.warning("superkey labels unusable (%d for %d paragraphs); using paragraph order", len(labels), n)
        return ParagraphAssignment.sequential(n)
    return ParagraphAssignment(tuple(range(1, n + 1)), tuple(labels), fallback=False)


def group_triplets(triplets: Sequence[Triplet], assignment: ParagraphAssignment) -> list[GroupedTriplet]:
    out = []
    for t in triplets:
        if not 0 <= t.paragraph < len(assignment):
            raise UnassignedParagraph(f"triplet from paragraph {t.paragraph} has no identifier")
        out.append(GroupedTriplet(assignment[t.paragraph], t))
    return out


def render_grouped(grouped: Sequence[GroupedTriplet], identifiers: Iterable[int] | None = None) -> str:
    """Line file of ``<id, a, b, c>`` records; a blank line closes each identifier's group."""
    order = list(identifiers) if identifiers is not None else sorted({g.identifier for g in grouped})
    by_id: dict[int, list[GroupedTriplet]] = {}
    for g in grouped:
        by_id.setdefault(g.identifier, []).append(g)
    text = ""
    for ident in order:
        for g in by_id.get(ident, []):
            text += g.render() + "\n"
        text += "\n"
    return text


_GROUPED_LINE = re.compile(r"^<\s*(\d+)\s*,\s*(.*)>\s*$")


def parse_grouped(text: str, kind: str = "aligned") -> list[GroupedTriplet]:
    """Inverse of :func:`render_grouped`. The last field absorbs any extra commas."""
    cls = AlignedTriplet if kind == "aligned" else SymbolicTriplet
    out = []
    for line in text.splitlines():
        m = _GROUPED_LINE.match(line.strip())
        if not m:
            continue
        parts = m.group(2).split(", ", 2)
        if len(parts) != 3:
            continue
        ident = int(m.group(1))
        out.append(GroupedTriplet(ident, cls(parts[0], parts[1], parts[2], ident - 1)))
    return out
