"""Embedding matrices, ground-truth pairs, dataset bundles and their file formats.

Matrices live in a little-endian binary format (magic ``TALN``) carrying the
float32 payload plus an aligned ID table. Pairs are JSON Lines, the
fact-language map is a plain JSON object, and a manifest JSON ties a full
dataset together.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadFormatError,
    BadMagicError,
    BadVersionError,
    DimensionOverflowError,
    DuplicateIdError,
    NonFiniteValueError,
    TrifuseError,
    ZeroRowError,
)

MAGIC = b"TALN"
FORMAT_VERSION = 1

SOURCE_TAGS = ("post_native", "post_english", "fact_native", "fact_english")
_TAG_TO_CODE = {t: i for i, t in enumerate(SOURCE_TAGS)}

# Hard cap on rows/cols read from a file header; anything larger is treated
# as a corrupt header rather than an allocation request.
_MAX_DIM = 1 << 40

ZERO_NORM_EPS = 1e-12


@dataclass
class EmbeddingMatrix:
    """N x D float32 matrix with an aligned ordered ID table."""

    ids: list[str]
    data: np.ndarray
    source_tag: str

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def row_index(self) -> dict[str, int]:
        return {item_id: i for i, item_id in enumerate(self.ids)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.source_tag == other.source_tag
            and self.data.shape == other.data.shape
            and np.array_equal(
                self.data.view(np.uint32), other.data.view(np.uint32)
            )
        )


def _check_matrix(ids: list[str], data: np.ndarray) -> None:
    if len(ids) != data.shape[0]:
        raise BadFormatError(
            f"id table has {len(ids)} entries for {data.shape[0]} rows"
        )
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DuplicateIdError(f"duplicate id {dup!r}")
    if not np.isfinite(data).all():
        row = int(np.argwhere(~np.isfinite(data).all(axis=1))[0, 0])
        raise NonFiniteValueError(f"non-finite value in row {row}")
    if data.shape[0]:
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        bad = np.nonzero(norms < ZERO_NORM_EPS)[0]
        if bad.size:
            raise ZeroRowError(int(bad[0]))


def make_matrix(ids: list[str], data, source_tag: str) -> EmbeddingMatrix:
    """Build a validated EmbeddingMatrix from raw data."""
    if source_tag not in _TAG_TO_CODE:
        raise BadFormatError(f"unknown source_tag {source_tag!r}")
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if arr.ndim != 2:
        raise BadFormatError(f"expected 2-D data, got shape {arr.shape}")
    _check_matrix(list(ids), arr)
    return EmbeddingMatrix(ids=list(ids), data=arr, source_tag=source_tag)


def save_matrix(m: EmbeddingMatrix, path) -> None:
    """Write a matrix in the binary format; atomic (temp file + rename)."""
    _check_matrix(m.ids, m.data)
    path = Path(path)
    rows, cols = m.data.shape
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBBQQ", FORMAT_VERSION, _TAG_TO_CODE[m.source_tag], 0, rows, cols))
        fh.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(m.ids)))
        for item_id in m.ids:
            raw = item_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
    tmp.replace(path)


def load_matrix(path) -> EmbeddingMatrix:
    """Read and validate a matrix from the binary format."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, tag_code, dtype_code, rows, cols = struct.unpack_from("<IBBQQ", blob, 4)
    except struct.error as exc:
        raise BadFormatError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if tag_code >= len(SOURCE_TAGS):
        raise BadFormatError(f"{path}: unknown source tag code {tag_code}")
    if dtype_code != 0:
        raise BadFormatError(f"{path}: unknown dtype code {dtype_code}")
    if rows > _MAX_DIM or cols > _MAX_DIM or rows * cols * 4 > len(blob):
        raise DimensionOverflowError(f"{path}: header claims {rows}x{cols}")
    offset = 4 + struct.calcsize("<IBBQQ")
    payload = rows * cols * 4
    data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
    data = np.ascontiguousarray(data.reshape(rows, cols))
    offset += payload
    try:
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        ids = []
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            ids.append(blob[offset : offset + length].decode("utf-8"))
            offset += length
    except struct.error as exc:
        raise BadFormatError(f"{path}: truncated id table") from exc
    _check_matrix(ids, data)
    return EmbeddingMatrix(ids=ids, data=data, source_tag=SOURCE_TAGS[tag_code])


def l2_normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Return a copy with unit-L2-norm rows."""
    normalized = l2_normalize(m.data)
    return EmbeddingMatrix(ids=list(m.ids), data=normalized.astype(np.float32), source_tag=m.source_tag)


def l2_normalize(data: np.ndarray) -> np.ndarray:
    """Row-normalize a plain array; 64-bit norms, dtype preserved."""
    norms = np.linalg.norm(data.astype(np.float64), axis=1, keepdims=True)
    small = np.nonzero(norms[:, 0] < ZERO_NORM_EPS)[0]
    if small.size:
        raise ZeroRowError(int(small[0]))
    return (data / norms.astype(data.dtype)).astype(data.dtype)


@dataclass
class PairEntry:
    post_id: str
    fact_ids: set[str]
    lang: str


@dataclass
class PairSet:
    """Ground-truth post-to-fact relevance plus language tags."""

    entries: list[PairEntry]
    fact_languages: dict[str, str]

    def post_ids(self) -> list[str]:
        return [e.post_id for e in self.entries]

    def by_post(self) -> dict[str, PairEntry]:
        return {e.post_id: e for e in self.entries}


def save_pairs(pairs: PairSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in pairs.entries:
            fh.write(
                json.dumps(
                    {"post_id": e.post_id, "fact_ids": sorted(e.fact_ids), "lang": e.lang},
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_pairs(path, fact_languages_path) -> PairSet:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append(
                PairEntry(post_id=obj["post_id"], fact_ids=set(obj["fact_ids"]), lang=obj["lang"])
            )
    with open(fact_languages_path, encoding="utf-8") as fh:
        fact_languages = json.load(fh)
    return PairSet(entries=entries, fact_languages=fact_languages)


@dataclass
class DatasetBundle:
    """The four embedding matrices plus pairs and a train/dev split."""

    post_native: EmbeddingMatrix
    post_english: EmbeddingMatrix
    fact_native: EmbeddingMatrix
    fact_english: EmbeddingMatrix
    pairs: PairSet
    split: dict[str, str]

    def matrices(self) -> dict[str, EmbeddingMatrix]:
        return {
            "post_native": self.post_native,
            "post_english": self.post_english,
            "fact_native": self.fact_native,
            "fact_english": self.fact_english,
        }

    def post_ids(self) -> list[str]:
        return self.post_native.ids

    def fact_ids(self) -> list[str]:
        return self.fact_native.ids

    def split_post_ids(self, which: str) -> list[str]:
        return [p for p in self.post_native.ids if self.split.get(p) == which]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def add(self, message: str) -> None:
        self.violations.append(message)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_bundle(b: DatasetBundle) -> ValidationReport:
    """Check every bundle invariant; violations are reported, not raised."""
    report = ValidationReport()
    for name, m in b.matrices().items():
        if m.source_tag != name:
            report.add(f"{name}: source_tag is {m.source_tag!r}")
        if len(set(m.ids)) != len(m.ids):
            report.add(f"{name}: duplicate ids")
        if not np.isfinite(m.data).all():
            report.add(f"{name}: non-finite values")
    if b.post_native.ids != b.post_english.ids:
        report.add("post matrices disagree on id order")
    if b.fact_native.ids != b.fact_english.ids:
        report.add("fact matrices disagree on id order")
    if b.post_native.dim != b.fact_native.dim:
        report.add(
            f"native family dimension mismatch: posts {b.post_native.dim}, facts {b.fact_native.dim}"
        )
    if b.post_english.dim != b.fact_english.dim:
        report.add(
            f"english family dimension mismatch: posts {b.post_english.dim}, facts {b.fact_english.dim}"
        )
    post_rows = set(b.post_native.ids)
    fact_rows = set(b.fact_native.ids)
    seen_posts = set()
    for e in b.pairs.entries:
        if e.post_id in seen_posts:
            report.add(f"pairs: duplicate post entry {e.post_id!r}")
        seen_posts.add(e.post_id)
        if e.post_id not in post_rows:
            report.add(f"pairs: unknown post_id {e.post_id!r}")
        if not e.fact_ids:
            report.add(f"pairs: post {e.post_id!r} has no ground-truth facts")
        for fid in sorted(e.fact_ids):
            if fid not in fact_rows:
                report.add(f"pairs: post {e.post_id!r} references unknown fact_id {fid!r}")
    for fid in fact_rows:
        if fid not in b.pairs.fact_languages:
            report.add(f"fact {fid!r} missing from fact-language map")
    split_posts = set(b.split)
    for pid in sorted(seen_posts - split_posts):
        report.add(f"post {pid!r} present in pairs but missing from split")
    for pid in sorted(split_posts - post_rows):
        report.add(f"split references unknown post_id {pid!r}")
    for pid in sorted(post_rows - split_posts):
        report.add(f"post {pid!r} missing from split")
    for pid, part in b.split.items():
        if part not in ("train", "dev"):
            report.add(f"split[{pid!r}] has unknown part {part!r}")
    return report


def split_dataset(pairs: PairSet, dev_fraction: float, seed: int) -> dict[str, str]:
    """Deterministic train/dev partition of the pair set's posts.

    |dev| = round(dev_fraction * n_posts). Pure function of the post-id set,
    the fraction, and the seed.
    """
    if not (0.0 < dev_fraction < 1.0):
        raise TrifuseError(f"dev_fraction must be in (0, 1), got {dev_fraction}")
    post_ids = sorted({e.post_id for e in pairs.entries})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(post_ids))
    n_dev = round(dev_fraction * len(post_ids))
    dev = {post_ids[i] for i in order[:n_dev]}
    return {pid: ("dev" if pid in dev else "train") for pid in post_ids}


def save_split(split: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split, fh, ensure_ascii=False, indent=0, sort_keys=True)


def load_split(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_manifest(path, *, matrix_paths: dict[str, str], pairs_path: str,
                   fact_languages_path: str, split_path: str | None = None,
                   split_seed: int | None = None, split_fraction: float | None = None) -> None:
    manifest = {
        "matrices": matrix_paths,
        "pairs": pairs_path,
        "fact_languages": fact_languages_path,
        "split": split_path,
        "split_seed": split_seed,
        "split_fraction": split_fraction,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_bundle(manifest_path) -> DatasetBundle:
    """Load a full dataset from a manifest JSON.

    Relative paths in the manifest resolve against the manifest's directory.
    If no split file is listed, the split is derived from the manifest's
    seed/fraction (defaults: seed 0, fraction 0.1).
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = manifest_path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    matrices = {
        name: load_matrix(resolve(manifest["matrices"][name])) for name in SOURCE_TAGS
    }
    pairs = load_pairs(resolve(manifest["pairs"]), resolve(manifest["fact_languages"]))
    if manifest.get("split"):
        split = load_split(resolve(manifest["split"]))
    else:
        split = split_dataset(
            pairs,
            manifest.get("split_fraction") or 0.1,
            manifest.get("split_seed") or 0,
        )
    return DatasetBundle(
        post_native=matrices["post_native"],
        post_english=matrices["post_english"],
        fact_native=matrices["fact_native"],
        fact_english=matrices["fact_english"],
        pairs=pairs,
        split=split,
    )
