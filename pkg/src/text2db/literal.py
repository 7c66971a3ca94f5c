"""Lenient reading of Python/JSON literals embedded in free-form model output."""

from __future__ import annotations

import ast
import json
import re
from typing import Any

_LITERALS = {"true": "True", "false": "False", "null": "None"}
_WORD = re.compile(r"[A-Za-z_]\w*")
_PAIRS = {"[": "]", "{": "}"}


def repair(segment: str) -> str:
    """Make JSON-ish text acceptable to ``ast.literal_eval`` without changing its length.

    Lowercase JSON literals become Python ones and ``//``/``#`` comments are blanked,
    all outside string literals. Equal length keeps error offsets meaningful.
    """
    out = []
    i, n = 0, len(segment)
    quote: str | None = None
    while i < n:
        ch = segment[i]
        if quote:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(segment[i + 1])
                i += 2
                continue
            if ch == quote:
                quote = None
            i += 1
            continue
        if ch in "\"'":
            quote = ch
            out.append(ch)
            i += 1
            continue
        if ch == "#" or segment.startswith("//", i):
            end = segment.find("\n", i)
            end = n if end < 0 else end
            out.append(" " * (end - i))
            i = end
            continue
        m = _WORD.match(segment, i)
        if m:
            word = m.group(0)
            out.append(_LITERALS.get(word, word))
            i = m.end()
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def match_bracket(text: str, start: int) -> int:
    """Index just past the bracket closing ``text[start]``, or -1."""
    stack = [_PAIRS[text[start]]]
    quote: str | None = None
    i = start + 1
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch in _PAIRS:
            stack.append(_PAIRS[ch])
        elif ch in "]}":
            if ch != stack[-1]:
                return -1
            stack.pop()
            if not stack:
                return i + 1
        i += 1
    return -1


def byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8"))


def parse_literal(segment: str) -> Any:
    """``ast.literal_eval`` after :func:`repair`, falling back to strict JSON."""
    try:
        return ast.literal_eval(repair(segment))
    except (SyntaxError, ValueError) as first:
        try:
            return json.loads(segment)
        except json.JSONDecodeError:
            raise first from None


def find_list_of_dicts(raw: str) -> list[dict] | None:
    """The last top-level ``[...]`` literal in ``raw`` holding only dicts, or None."""
    found = None
    i = 0
    while True:
        start = raw.find("[", i)
        if start < 0:
            return found
        end = match_bracket(raw, start)
        if end < 0:
            i = start + 1
            continue
        try:
            value = parse_literal(raw[start:end])
        except (SyntaxError, ValueError, TypeError, MemoryError, RecursionError):
            i = start + 1
            continue
        if isinstance(value, list) and all(isinstance(v, dict) for v in value):
            found = value
            i = end
        else:
            i = start + 1
