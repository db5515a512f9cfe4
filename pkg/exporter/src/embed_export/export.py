"""Export posts and facts as the engine's four-matrix dataset."""

from __future__ import annotations

from pathlib import Path

from .encoders import get_encoder
from .records import RecordError, TextRecord
from .writer import write_fact_languages, write_manifest, write_matrix, write_pairs


def _texts(records: list[TextRecord], field: str) -> list[str]:
    """The chosen text field per record, falling back to the other when empty."""
    other = "english_text" if field == "native_text" else "native_text"
    return [getattr(r, field) or getattr(r, other) for r in records]


def export_embeddings(
    posts: list[TextRecord],
    facts: list[TextRecord],
    pairs: dict[str, set[str]],
    out_dir,
    encoder_name: str = "hash-v1",
    dim: int = 1024,
    batch_size: int = 32,
) -> Path:
    """Encode both roles in both languages; write matrices, pairs, manifest.

    Row order follows record order. Returns the manifest path.
    """
    if not posts or not facts:
        raise RecordError("posts and facts must both be non-empty")
    post_ids = {r.id for r in posts}
    fact_ids = {r.id for r in facts}
    for post_id, fids in pairs.items():
        if post_id not in post_ids:
            raise RecordError(f"pair references unknown post {post_id!r}")
        unknown = fids - fact_ids
        if unknown:
            raise RecordError(f"post {post_id!r} pairs reference unknown facts {sorted(unknown)}")
    missing = post_ids - set(pairs)
    if missing:
        raise RecordError(f"posts without any paired fact: {sorted(missing)}")

    encoder = get_encoder(encoder_name, dim=dim, batch_size=batch_size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix_paths = {}
    for role, records in (("post", posts), ("fact", facts)):
        ids = [r.id for r in records]
        for source, field in (("native", "native_text"), ("english", "english_text")):
            tag = f"{role}_{source}"
            data = encoder.encode(_texts(records, field))
            write_matrix(out_dir / f"{tag}.taln", ids, data, tag)
            matrix_paths[tag] = f"{tag}.taln"
    write_pairs(out_dir / "pairs.jsonl", pairs, {r.id: r.lang for r in posts})
    write_fact_languages(out_dir / "fact_languages.json", {r.id: r.lang for r in facts})
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, matrix_paths, "pairs.jsonl", "fact_languages.json")
    return manifest
