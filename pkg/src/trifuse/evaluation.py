"""Top-K retrieval over fused scores and Success@K / Recall@K reporting.

Success@K is the fraction of queries with at least one relevant fact in the
top K; Recall@K averages, per query, the fraction of that query's relevant
facts found in the top K. Both are reported per language and pooled, in
monolingual (same-language candidates only) and crosslingual (all candidates)
modes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .errors import TrifuseError
from .store import DatasetBundle, PairSet

DEFAULT_KS = (1, 10, 20)
MODES = ("monolingual", "crosslingual")


def top_k(scores: np.ndarray, k: int, candidate_mask: np.ndarray | None = None) -> list[tuple[int, float]]:
    """The k highest-scoring unmasked indices, descending; ties by ascending index.

    Returns fewer than k entries when fewer candidates exist.
    """
    if k < 1:
        raise TrifuseError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    if candidate_mask is None:
        candidates = np.arange(scores.shape[0])
    else:
        candidates = np.nonzero(np.asarray(candidate_mask))[0]
    if candidates.size == 0:
        raise TrifuseError("empty candidate set")
    sub = scores[candidates]
    # lexsort: primary key last -> sort by -score, break ties by index
    order = np.lexsort((candidates, -sub))[:k]
    picked = candidates[order]
    return [(int(i), float(scores[i])) for i in picked]


@dataclass
class RetrievalRun:
    mode: str
    k_max: int
    ranked: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for pid, entries in self.ranked.items():
                fh.write(json.dumps({"post_id": pid, "ranked": [fid for fid, _ in entries]}) + "\n")


@dataclass
class MetricsReport:
    # cells keyed (mode, language-or-ALL/ALL_macro, k)
    cells: dict[tuple[str, str, int], dict] = field(default_factory=dict)

    def get(self, mode: str, lang: str, k: int) -> dict:
        return self.cells[(mode, lang, k)]

    def to_json(self) -> dict:
        out: dict = {}
        for (mode, lang, k), cell in sorted(self.cells.items()):
            out.setdefault(mode, {}).setdefault(lang, {})[f"@{k}"] = cell
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            ks = sorted({k for (_, _, k) in self.cells})
            header = ["mode", "language"]
            for k in ks:
                header += [f"R@{k}", f"S@{k}"]
            writer.writerow(header)
            rows = sorted({(mode, lang) for (mode, lang, _) in self.cells})
            for mode, lang in rows:
                row = [mode, lang]
                for k in ks:
                    cell = self.cells.get((mode, lang, k))
                    row += [cell["recall"], cell["success"]] if cell else ["", ""]
                writer.writerow(row)


def success_at_k(run: RetrievalRun, pairs: PairSet, k: int) -> float:
    if k > run.k_max:
        raise TrifuseError(f"k={k} exceeds the run's K_max={run.k_max}")
    by_post = pairs.by_post()
    hits = 0
    for pid, entries in run.ranked.items():
        positives = by_post[pid].fact_ids
        if any(fid in positives for fid, _ in entries[:k]):
            hits += 1
    return hits / len(run.ranked) if run.ranked else 0.0


def recall_at_k(run: RetrievalRun, pairs: PairSet, k: int) -> float:
    if k > run.k_max:
        raise TrifuseError(f"k={k} exceeds the run's K_max={run.k_max}")
    by_post = pairs.by_post()
    total = 0.0
    for pid, entries in run.ranked.items():
        positives = by_post[pid].fact_ids
        found = sum(1 for fid, _ in entries[:k] if fid in positives)
        total += found / len(positives)
    return total / len(run.ranked) if run.ranked else 0.0


def _subset_run(run: RetrievalRun, post_ids: set[str]) -> RetrievalRun:
    return RetrievalRun(
        mode=run.mode,
        k_max=run.k_max,
        ranked={pid: entries for pid, entries in run.ranked.items() if pid in post_ids},
    )


def compute_metrics(run: RetrievalRun, pairs: PairSet, ks=DEFAULT_KS) -> MetricsReport:
    """Per-language and pooled metric grid for one retrieval run.

    ALL is micro-averaged (pooled over queries); ALL_macro is the unweighted
    mean of the per-language values.
    """
    report = MetricsReport()
    by_post = pairs.by_post()
    langs: dict[str, set[str]] = {}
    for pid in run.ranked:
        langs.setdefault(by_post[pid].lang, set()).add(pid)
    ks = [k for k in ks if k <= run.k_max]
    for k in ks:
        per_lang = {}
        for lang, posts in sorted(langs.items()):
            sub = _subset_run(run, posts)
            cell = {
                "success": success_at_k(sub, pairs, k),
                "recall": recall_at_k(sub, pairs, k),
                "query_count": len(posts),
            }
            report.cells[(run.mode, lang, k)] = cell
            per_lang[lang] = cell
        report.cells[(run.mode, "ALL", k)] = {
            "success": success_at_k(run, pairs, k),
            "recall": recall_at_k(run, pairs, k),
            "query_count": len(run.ranked),
        }
        if per_lang:
            report.cells[(run.mode, "ALL_macro", k)] = {
                "success": float(np.mean([c["success"] for c in per_lang.values()])),
                "recall": float(np.mean([c["recall"] for c in per_lang.values()])),
                "query_count": len(run.ranked),
            }
    return report


def build_run(
    scores: np.ndarray,
    post_ids: list[str],
    bundle: DatasetBundle,
    mode: str,
    k_max: int = 20,
) -> RetrievalRun:
    """Rank facts per post from a fact x post score matrix, applying the language mask."""
    if mode not in MODES:
        raise TrifuseError(f"mode must be one of {MODES}, got {mode!r}")
    fact_ids = bundle.fact_ids()
    fact_langs = np.array([bundle.pairs.fact_languages.get(fid, "") for fid in fact_ids])
    by_post = bundle.pairs.by_post()
    run = RetrievalRun(mode=mode, k_max=k_max)
    for col, pid in enumerate(post_ids):
        if mode == "monolingual":
            mask = fact_langs == by_post[pid].lang
        else:
            mask = None
        entries = top_k(scores[:, col], k_max, mask)
        run.ranked[pid] = [(fact_ids[i], score) for i, score in entries]
    return run


def evaluate(
    model: M.ModelParams,
    bundle: DatasetBundle,
    mode: str,
    k_max: int = 20,
    split: str = "dev",
    fact_block_size: int = 4096,
    post_block_size: int = 4096,
) -> tuple[RetrievalRun, MetricsReport]:
    """Blockwise scoring plus the full metric grid for one split and mode."""
    if split == "all":
        post_ids = bundle.post_ids()
    else:
        post_ids = bundle.split_post_ids(split)
    if not post_ids:
        raise TrifuseError(f"no posts in split {split!r}")
    scores, post_ids = M.bundle_scores(
        model, bundle, post_ids, fact_block_size=fact_block_size, post_block_size=post_block_size
    )
    run = build_run(scores, post_ids, bundle, mode, k_max)
    return run, compute_metrics(run, bundle.pairs)


def monitor_value(report: MetricsReport, monitor: str, mode: str) -> float:
    """Read a monitor like ``recall@10`` or ``success@1`` from the pooled cell."""
    name, _, k = monitor.partition("@")
    key = {"recall": "recall", "r": "recall", "success": "success", "s": "success"}.get(name.lower())
    if key is None or not k.isdigit():
        raise TrifuseError(f"unknown monitor {monitor!r}")
    return report.get(mode, "ALL", int(k))[key]
