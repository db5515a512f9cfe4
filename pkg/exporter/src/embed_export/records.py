"""CSV/TSV text records: one row per post or fact."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

REQUIRED_COLUMNS = ("id", "native_text", "english_text", "lang")


class RecordError(ValueError):
    pass


@dataclass
class TextRecord:
    id: str
    native_text: str
    english_text: str
    lang: str


def read_records(path) -> list[TextRecord]:
    """Load records from a CSV (or TSV, by extension) with the fixed columns.

    IDs must be unique and every record needs at least one non-empty text field.
    """
    path = Path(path)
    delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    records: list[TextRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise RecordError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            rec = TextRecord(
                id=(row["id"] or "").strip(),
                native_text=(row["native_text"] or "").strip(),
                english_text=(row["english_text"] or "").strip(),
                lang=(row["lang"] or "").strip(),
            )
            if not rec.id:
                raise RecordError(f"{path}:{row_no}: empty id")
            if rec.id in seen:
                raise RecordError(f"{path}:{row_no}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            if not rec.native_text and not rec.english_text:
                raise RecordError(f"{path}:{row_no}: both text fields empty for {rec.id!r}")
            records.append(rec)
    if not records:
        raise RecordError(f"{path}: no records")
    return records


def read_pairs(path) -> dict[str, set[str]]:
    """Load the post-to-fact relevance map from a CSV with columns post_id, fact_id."""
    pairs: dict[str, set[str]] = {}
    path = Path(path)
    delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if "post_id" not in (reader.fieldnames or []) or "fact_id" not in reader.fieldnames:
            raise RecordError(f"{path}: expected columns post_id, fact_id")
        for row in reader:
            pairs.setdefault(row["post_id"].strip(), set()).add(row["fact_id"].strip())
    if not pairs:
        raise RecordError(f"{path}: no pairs")
    return pairs
