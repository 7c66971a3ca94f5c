"""Access to the prompt templates shipped under ``text2db/templates``."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load(name: str) -> str:
    """Return the raw bytes of template ``name`` decoded as UTF-8, unchanged."""
    path = resources.files("text2db").joinpath("templates", f"{name}.txt")
    return path.read_bytes().decode("utf-8")


def render(name: str, **values: str) -> str:
    """Fill ``{placeholder}`` slots with ``str.format``; ``{{``/``}}`` escape literal braces."""
    return load(name).format(**values)
