"""Synthetic dataset generator with planted post-fact matches.

Each post embedding is built at a controlled cosine (~0.9 plus jitter) to its
ground-truth fact's embedding, independently in the native and english
spaces, across a handful of synthetic languages. Distractor facts are random
unit vectors, so a working model separates them easily while a random ranker
scores ~K / n_facts.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .store import (
    DatasetBundle,
    PairEntry,
    PairSet,
    make_matrix,
    save_matrix,
    save_pairs,
    save_split,
    split_dataset,
    write_manifest,
)

LANGS = ("aaa", "bbb", "ccc", "ddd", "eee", "fff", "ggg", "hhh")


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _at_cosine(rng: np.random.Generator, base: np.ndarray, cosine: float) -> np.ndarray:
    """A unit vector at the given cosine to the unit vector ``base``."""
    g = rng.standard_normal(base.shape)
    g -= (g @ base) * base
    g /= np.linalg.norm(g)
    return cosine * base + np.sqrt(max(1.0 - cosine**2, 0.0)) * g


def generate_bundle(
    n_posts: int = 500,
    n_facts: int = 2000,
    dim: int = 64,
    n_langs: int = 4,
    pair_cosine: float = 0.9,
    cosine_jitter: float = 0.03,
    two_fact_fraction: float = 0.05,
    dev_fraction: float = 0.2,
    seed: int = 0,
) -> DatasetBundle:
    if n_facts < n_posts * 2:
        raise ValueError("need n_facts >= 2 * n_posts to plant matches and distractors")
    rng = np.random.default_rng(seed)
    langs = LANGS[:n_langs]

    fact_ids = [f"fact{i:05d}" for i in range(n_facts)]
    post_ids = [f"post{i:05d}" for i in range(n_posts)]
    fact_native = _unit_rows(rng, n_facts, dim)
    fact_english = _unit_rows(rng, n_facts, dim)
    fact_langs = [langs[int(rng.integers(n_langs))] for _ in range(n_facts)]

    # primary positive of post p is fact p; secondary positives, when planted,
    # come from the back half of the fact pool and are near-copies
    n_two = int(round(two_fact_fraction * n_posts))
    secondary = rng.choice(np.arange(n_posts, n_facts), size=n_two, replace=False)

    post_native = np.empty((n_posts, dim))
    post_english = np.empty((n_posts, dim))
    entries = []
    for p in range(n_posts):
        c_native = float(np.clip(pair_cosine + cosine_jitter * rng.standard_normal(), 0.5, 0.99))
        c_english = float(np.clip(pair_cosine + cosine_jitter * rng.standard_normal(), 0.5, 0.99))
        post_native[p] = _at_cosine(rng, fact_native[p], c_native)
        post_english[p] = _at_cosine(rng, fact_english[p], c_english)
        positives = {fact_ids[p]}
        if p < n_two:
            s = int(secondary[p])
            fact_native[s] = _at_cosine(rng, fact_native[p], 0.97)
            fact_english[s] = _at_cosine(rng, fact_english[p], 0.97)
            fact_langs[s] = fact_langs[p]
            positives.add(fact_ids[s])
        entries.append(PairEntry(post_id=post_ids[p], fact_ids=positives, lang=fact_langs[p]))

    pairs = PairSet(entries=entries, fact_languages=dict(zip(fact_ids, fact_langs)))
    split = split_dataset(pairs, dev_fraction, seed + 1)
    return DatasetBundle(
        post_native=make_matrix(post_ids, post_native, "post_native"),
        post_english=make_matrix(post_ids, post_english, "post_english"),
        fact_native=make_matrix(fact_ids, fact_native, "fact_native"),
        fact_english=make_matrix(fact_ids, fact_english, "fact_english"),
        pairs=pairs,
        split=split,
    )


def write_bundle(bundle: DatasetBundle, out_dir, split_seed: int | None = None,
                 split_fraction: float | None = None) -> Path:
    """Persist a bundle plus manifest; returns the manifest path."""
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix_paths = {}
    for name, matrix in bundle.matrices().items():
        path = f"{name}.taln"
        save_matrix(matrix, out_dir / path)
        matrix_paths[name] = path
    save_pairs(bundle.pairs, out_dir / "pairs.jsonl")
    with open(out_dir / "fact_languages.json", "w", encoding="utf-8") as fh:
        json.dump(bundle.pairs.fact_languages, fh)
    save_split(bundle.split, out_dir / "split.json")
    manifest_path = out_dir / "manifest.json"
    write_manifest(
        manifest_path,
        matrix_paths=matrix_paths,
        pairs_path="pairs.jsonl",
        fact_languages_path="fact_languages.json",
        split_path="split.json",
        split_seed=split_seed,
        split_fraction=split_fraction,
    )
    return manifest_path
