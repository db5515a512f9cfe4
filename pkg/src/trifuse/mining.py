"""Hard-negative mining over precomputed unit-norm embeddings.

A hard negative for a post is a non-ground-truth fact whose embedding sits
close to the post's; training uses these to sharpen the decision boundary
between semantically similar but unrelated pairs.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import MiningError
from .evaluation import top_k
from .store import EmbeddingMatrix, PairSet


def mine_hard_negatives(
    post_embs: EmbeddingMatrix,
    fact_embs: EmbeddingMatrix,
    pairs: PairSet,
    m: int = 5,
    post_ids: list[str] | None = None,
    block_size: int = 1024,
) -> dict[str, list[tuple[str, float]]]:
    """Top-m most-similar non-positive facts per post, most similar first.

    Embeddings must be row-normalized (cosine = dot product). Ties break by
    ascending fact row index. Posts are processed blockwise to bound memory.
    """
    if m < 1:
        raise MiningError(f"m must be >= 1, got {m}")
    by_post = pairs.by_post()
    if post_ids is None:
        post_ids = [pid for pid in post_embs.ids if pid in by_post]
    post_index = post_embs.row_index()
    fact_index = fact_embs.row_index()
    n_facts = fact_embs.n
    result: dict[str, list[tuple[str, float]]] = {}
    post_f64 = post_embs.data.astype(np.float64)
    fact_f64 = fact_embs.data.astype(np.float64)
    for start in range(0, len(post_ids), block_size):
        block = post_ids[start : start + block_size]
        rows = [post_index[pid] for pid in block]
        sims = post_f64[rows] @ fact_f64.T  # block x n_facts
        for i, pid in enumerate(block):
            positives = by_post[pid].fact_ids
            available = n_facts - len(positives)
            if available == 0:
                raise MiningError(f"post {pid!r}: every fact is a positive, nothing to mine")
            if m > available:
                raise MiningError(
                    f"post {pid!r}: m={m} exceeds the {available} non-positive facts"
                )
            mask = np.ones(n_facts, dtype=bool)
            for fid in positives:
                mask[fact_index[fid]] = False
            picked = top_k(sims[i], m, mask)
            result[pid] = [(fact_embs.ids[j], score) for j, score in picked]
    return result


def save_negatives(negatives: dict[str, list[tuple[str, float]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid, entries in negatives.items():
            fh.write(
                json.dumps(
                    {"post_id": pid, "negatives": [{"fact_id": fid, "score": score} for fid, score in entries]}
                )
                + "\n"
            )


def load_negatives(path) -> dict[str, list[tuple[str, float]]]:
    out: dict[str, list[tuple[str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out[obj["post_id"]] = [(e["fact_id"], e["score"]) for e in obj["negatives"]]
    return out
