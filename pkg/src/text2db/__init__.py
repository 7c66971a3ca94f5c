"""Synthesize relational databases from unstructured text and score them against ground truth."""

from __future__ import annotations

__version__ = "0.1.0"
