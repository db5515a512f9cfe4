"""Writers for the retrieval engine's on-disk dataset format.

The engine consumes a manifest JSON pointing at four binary embedding
matrices (magic "TALN": version, source tag, dtype, rows, cols, float32
little-endian row-major payload, then a length-prefixed UTF-8 ID table),
a pairs JSON Lines file, and a fact-language JSON map. This module writes
those formats directly; it does not depend on the engine package.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TALN"
FORMAT_VERSION = 1
SOURCE_TAGS = ("post_native", "post_english", "fact_native", "fact_english")
_TAG_TO_CODE = {t: i for i, t in enumerate(SOURCE_TAGS)}


def write_matrix(path, ids: list[str], data: np.ndarray, source_tag: str) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2 or data.shape[0] != len(ids):
        raise ValueError(f"data shape {data.shape} does not match {len(ids)} ids")
    if not np.isfinite(data).all():
        raise ValueError("non-finite embedding values")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(
            struct.pack(
                "<IBBQQ", FORMAT_VERSION, _TAG_TO_CODE[source_tag], 0, data.shape[0], data.shape[1]
            )
        )
        fh.write(data.tobytes())
        fh.write(struct.pack("<Q", len(ids)))
        for item in ids:
            raw = item.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
    tmp.replace(path)


def write_pairs(path, pairs: dict[str, set[str]], post_langs: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for post_id in sorted(pairs):
            fh.write(
                json.dumps(
                    {
                        "post_id": post_id,
                        "fact_ids": sorted(pairs[post_id]),
                        "lang": post_langs[post_id],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def write_fact_languages(path, fact_langs: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(sorted(fact_langs.items())), fh, indent=2, ensure_ascii=False)


def write_manifest(path, matrix_paths: dict[str, str], pairs_path: str,
                   fact_languages_path: str) -> None:
    manifest = {
        "matrices": matrix_paths,
        "pairs": pairs_path,
        "fact_languages": fact_languages_path,
        "split": None,
        "split_seed": 0,
        "split_fraction": 0.1,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
