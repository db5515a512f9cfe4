"""Command line for exporting text datasets to the engine's binary format."""

from __future__ import annotations

import sys

import click

from .encoders import EncoderError
from .export import export_embeddings
from .records import RecordError, read_pairs, read_records


@click.command()
@click.option("--posts", "posts_path", required=True, type=click.Path(exists=True),
              help="CSV/TSV with columns id, native_text, english_text, lang.")
@click.option("--facts", "facts_path", required=True, type=click.Path(exists=True),
              help="CSV/TSV with columns id, native_text, english_text, lang.")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True),
              help="CSV/TSV with columns post_id, fact_id.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--encoder", default="hash-v1", show_default=True,
              help="'hash-v1' (pinned, deterministic) or 'sbert:<model>'.")
@click.option("--dim", type=int, default=1024, show_default=True,
              help="Output width for the hash encoder.")
@click.option("--batch-size", type=int, default=32, show_default=True)
def main(posts_path, facts_path, pairs_path, out_dir, encoder, dim, batch_size):
    """Encode posts and facts (native and English) into the engine's dataset format."""
    try:
        posts = read_records(posts_path)
        facts = read_records(facts_path)
        pairs = read_pairs(pairs_path)
        manifest = export_embeddings(
            posts, facts, pairs, out_dir, encoder_name=encoder, dim=dim, batch_size=batch_size
        )
    except (RecordError, EncoderError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"wrote {manifest}")


if __name__ == "__main__":
    main()
