"""On-disk corpus layout: ground truth, numbered documents, and a manifest."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from .materialize import DenormalizedTable
from .model import Difficulty, Document

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
GROUND_TRUTH_NAMES = ("ground_truth.sqlite", "ground_truth.db", "ground_truth.csv")


class CorpusInvalid(ValueError):
    pass


@dataclass(frozen=True)
class CorpusEntry:
    doc_id: str
    document: Document
    gt_rows: tuple[int, ...] | None = None


@dataclass
class Corpus:
    root: Path
    domain: str = ""
    central_table: str | None = None
    entries: list[CorpusEntry] = field(default_factory=list)

    @property
    def ground_truth_path(self) -> Path | None:
        for name in GROUND_TRUTH_NAMES:
            if (self.root / name).exists():
                return self.root / name
        return None

    @cached_property
    def flattened(self) -> DenormalizedTable | None:
        from .datagen import flatten_ground_truth

        path = self.ground_truth_path
        return flatten_ground_truth(path, self.central_table) if path is not None else None

    def ground_truth_for(self, entry: CorpusEntry) -> DenormalizedTable | None:
        """The document's ground-truth rows with central keys renumbered 1..k in paragraph order."""
        table = self.flattened
        if table is None:
            return None
        if entry.gt_rows is not None:
            bad = [i for i in entry.gt_rows if not 0 <= i < table.n_rows]
            if bad:
                raise CorpusInvalid(f"{entry.doc_id}: ground-truth rows out of range: {bad}")
            table = table.subset(entry.gt_rows)
        return table.rekeyed()


def load_corpus(root: str | Path) -> Corpus:
    """Read a corpus directory; without a manifest every ``documents/*.txt`` file is used."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusInvalid(f"corpus directory not found: {root}")
    manifest_path = root / MANIFEST
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusInvalid(f"{manifest_path}: {exc}") from exc
        items = manifest.get("documents", [])
        domain = manifest.get("domain", "") or ""
        central = manifest.get("central_table")
    else:
        docs_dir = root / "documents"
        files = sorted(docs_dir.glob("*.txt")) if docs_dir.is_dir() else []
        items = [{"file": str(p.relative_to(root))} for p in files]
        domain, central = root.name, None
    entries = []
    for item in items:
        path = root / item["file"]
        if not path.exists():
            raise CorpusInvalid(f"document listed in manifest is missing: {path}")
        difficulty = item.get("difficulty")
        doc_id = Path(item["file"]).stem
        document = Document.from_text(path.read_text(encoding="utf-8"), domain=domain,
                                      difficulty=Difficulty(difficulty) if difficulty else None, doc_id=doc_id)
        rows = item.get("gt_rows")
        entries.append(CorpusEntry(doc_id, document, tuple(rows) if rows is not None else None))
    return Corpus(root, domain, central, entries)
