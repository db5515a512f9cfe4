import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trifuse.errors import (
    BadMagicError,
    BadVersionError,
    DimensionOverflowError,
    DuplicateIdError,
    NonFiniteValueError,
    TrifuseError,
    ZeroRowError,
)
from trifuse.store import (
    EmbeddingMatrix,
    PairEntry,
    PairSet,
    l2_normalize_rows,
    load_bundle,
    load_matrix,
    make_matrix,
    save_matrix,
    split_dataset,
    validate_bundle,
)
from conftest import build_bundle


def _write_raw(path, rows, cols, payload, ids, magic=b"TALN", version=1, tag=0, dtype=0):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IBBQQ", version, tag, dtype, rows, cols))
        fh.write(np.asarray(payload, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(ids)))
        for item in ids:
            raw = item.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


class TestLoadSave:
    def test_smallest_valid_file(self, tmp_path):
        path = tmp_path / "m.taln"
        _write_raw(path, 2, 3, [[1, 2, 3], [4, 5, 6]], ["a", "b"])
        m = load_matrix(path)
        assert m.ids == ["a", "b"]
        assert m.data.shape == (2, 3)
        assert m.source_tag == "post_native"

    def test_nan_payload_rejected(self, tmp_path):
        path = tmp_path / "m.taln"
        _write_raw(path, 2, 2, [[float("nan"), 1], [1, 1]], ["a", "b"])
        with pytest.raises(NonFiniteValueError):
            load_matrix(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.taln"
        _write_raw(path, 1, 1, [[1.0]], ["a"], magic=b"NOPE")
        with pytest.raises(BadMagicError):
            load_matrix(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.taln"
        _write_raw(path, 1, 1, [[1.0]], ["a"], version=9)
        with pytest.raises(BadVersionError):
            load_matrix(path)

    def test_dimension_overflow(self, tmp_path):
        path = tmp_path / "m.taln"
        _write_raw(path, 1, 1, [[1.0]], ["a"])
        blob = bytearray(path.read_bytes())
        struct.pack_into("<Q", blob, 10, 2**50)  # rows field
        path.write_bytes(bytes(blob))
        with pytest.raises(DimensionOverflowError):
            load_matrix(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "m.taln"
        _write_raw(path, 2, 1, [[1.0], [2.0]], ["a", "a"])
        with pytest.raises(DuplicateIdError):
            load_matrix(path)

    def test_save_duplicate_ids_rejected_before_writing(self, tmp_path):
        m = EmbeddingMatrix(ids=["a", "a"], data=np.ones((2, 2), np.float32), source_tag="post_native")
        path = tmp_path / "m.taln"
        with pytest.raises(DuplicateIdError):
            save_matrix(m, path)
        assert not path.exists()

    def test_degenerate_1x1_layout(self, tmp_path):
        m = make_matrix(["a"], [[1.0]], "fact_native")
        path = tmp_path / "m.taln"
        save_matrix(m, path)
        blob = path.read_bytes()
        # fixed header (26 bytes) + 4 payload bytes + id table (8 + 4 + 1)
        assert len(blob) == 26 + 4 + 8 + 4 + 1
        assert blob[:4] == b"TALN"

    def test_round_trip_100x16(self, tmp_path):
        rng = np.random.default_rng(42)
        m = make_matrix([f"id{i}" for i in range(100)], rng.standard_normal((100, 16)), "post_english")
        p1 = tmp_path / "m1.taln"
        p2 = tmp_path / "m2.taln"
        save_matrix(m, p1)
        loaded = load_matrix(p1)
        save_matrix(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded == m

    def test_round_trip_3x4(self, tmp_path):
        rng = np.random.default_rng(7)
        m = make_matrix(["x", "y", "z"], rng.standard_normal((3, 4)), "fact_english")
        path = tmp_path / "m.taln"
        save_matrix(m, path)
        assert load_matrix(path) == m

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(1, 8),
        d=st.integers(1, 6),
        seed=st.integers(0, 2**31),
        tag=st.sampled_from(["post_native", "post_english", "fact_native", "fact_english"]),
    )
    def test_round_trip_property(self, tmp_path_factory, n, d, seed, tag):
        rng = np.random.default_rng(seed)
        data = rng.standard_normal((n, d)) + 0.5  # keeps rows off exact zero
        m = make_matrix([f"i{k}" for k in range(n)], data, tag)
        path = tmp_path_factory.mktemp("rt") / "m.taln"
        save_matrix(m, path)
        assert load_matrix(path) == m


class TestNormalize:
    def test_three_four_five(self):
        m = make_matrix(["a"], [[3.0, 4.0]], "post_native")
        out = l2_normalize_rows(m)
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-6)

    def test_unit_row_identity(self):
        m = make_matrix(["a"], [[1.0, 0.0]], "post_native")
        np.testing.assert_allclose(l2_normalize_rows(m).data, [[1.0, 0.0]], atol=1e-7)

    def test_ones_row(self):
        m = make_matrix(["a"], [[1.0, 1.0, 1.0, 1.0]], "post_native")
        np.testing.assert_allclose(l2_normalize_rows(m).data, [[0.5] * 4], atol=1e-6)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        m = make_matrix([f"i{k}" for k in range(20)], rng.standard_normal((20, 8)), "fact_native")
        once = l2_normalize_rows(m)
        twice = l2_normalize_rows(once)
        np.testing.assert_allclose(once.data, twice.data, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(once.data, axis=1), 1.0, atol=1e-6)

    def test_zero_row_rejected(self):
        with pytest.raises(ZeroRowError) as exc:
            make_matrix(["a", "b"], [[1.0, 0.0], [0.0, 0.0]], "post_native")
        assert exc.value.row == 1


class TestValidateBundle:
    def test_consistent_bundle_empty_report(self):
        bundle = build_bundle(n_posts=5, n_facts=10)
        assert validate_bundle(bundle).ok

    def test_unknown_fact_id(self):
        bundle = build_bundle()
        bundle.pairs.entries[0].fact_ids.add("missing")
        report = validate_bundle(bundle)
        assert len(report.violations) == 1
        assert "missing" in report.violations[0]

    def test_post_missing_from_split(self):
        bundle = build_bundle()
        del bundle.split["p0"]
        report = validate_bundle(bundle)
        assert not report.ok
        assert all("p0" in v for v in report.violations)


def _pairs(n):
    return PairSet(
        entries=[PairEntry(post_id=f"p{i}", fact_ids={f"f{i}"}, lang="aaa") for i in range(n)],
        fact_languages={f"f{i}": "aaa" for i in range(n)},
    )


class TestSplit:
    def test_deterministic(self):
        pairs = _pairs(10)
        s1 = split_dataset(pairs, 0.2, seed=7)
        s2 = split_dataset(pairs, 0.2, seed=7)
        assert s1 == s2
        assert sum(1 for v in s1.values() if v == "dev") == 2

    def test_zero_fraction_rejected(self):
        with pytest.raises(TrifuseError):
            split_dataset(_pairs(10), 0.0, seed=0)

    def test_exact_count_1000(self):
        split = split_dataset(_pairs(1000), 0.1, seed=3)
        assert sum(1 for v in split.values() if v == "dev") == 100
        assert len(split) == 1000

    def test_partition(self):
        split = split_dataset(_pairs(50), 0.3, seed=1)
        assert set(split) == {f"p{i}" for i in range(50)}
        assert set(split.values()) <= {"train", "dev"}


class TestManifest:
    def test_bundle_round_trip(self, tmp_path):
        from trifuse.synth import generate_bundle, write_bundle

        bundle = generate_bundle(n_posts=6, n_facts=14, dim=5, n_langs=2, seed=1)
        manifest = write_bundle(bundle, tmp_path)
        loaded = load_bundle(manifest)
        assert loaded.post_native == bundle.post_native
        assert loaded.fact_english == bundle.fact_english
        assert loaded.split == bundle.split
        assert {e.post_id: e.fact_ids for e in loaded.pairs.entries} == {
            e.post_id: e.fact_ids for e in bundle.pairs.entries
        }
        assert validate_bundle(loaded).ok
