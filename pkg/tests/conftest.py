import numpy as np
import pytest

from trifuse.store import DatasetBundle, PairEntry, PairSet, make_matrix


def build_bundle(n_posts=5, n_facts=10, dim=4, langs=("aaa", "bbb"), seed=0,
                 dev_posts=1, extra_positive_for=()):
    """Small consistent bundle: post i's positive is fact i, same language."""
    rng = np.random.default_rng(seed)
    post_ids = [f"p{i}" for i in range(n_posts)]
    fact_ids = [f"f{i}" for i in range(n_facts)]
    fact_langs = {fid: langs[i % len(langs)] for i, fid in enumerate(fact_ids)}
    entries = []
    for i, pid in enumerate(post_ids):
        positives = {fact_ids[i]}
        if i in extra_positive_for:
            # second positive from the back of the pool, same language
            j = next(
                j for j in range(n_facts - 1, n_posts - 1, -1)
                if fact_langs[fact_ids[j]] == fact_langs[fact_ids[i]]
            )
            positives.add(fact_ids[j])
        entries.append(PairEntry(post_id=pid, fact_ids=positives, lang=fact_langs[fact_ids[i]]))
    pairs = PairSet(entries=entries, fact_languages=fact_langs)
    split = {pid: ("dev" if i < dev_posts else "train") for i, pid in enumerate(post_ids)}
    return DatasetBundle(
        post_native=make_matrix(post_ids, rng.standard_normal((n_posts, dim)), "post_native"),
        post_english=make_matrix(post_ids, rng.standard_normal((n_posts, dim)), "post_english"),
        fact_native=make_matrix(fact_ids, rng.standard_normal((n_facts, dim)), "fact_native"),
        fact_english=make_matrix(fact_ids, rng.standard_normal((n_facts, dim)), "fact_english"),
        pairs=pairs,
        split=split,
    )


@pytest.fixture
def tiny_bundle():
    return build_bundle()
