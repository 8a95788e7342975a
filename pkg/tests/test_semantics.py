import math

import numpy as np
import pytest

from lava.errors import ConfigurationError, DataError
from lava.semantics import (LabelEmbeddingTable, SimilarityGroup,
                            load_embeddings, normalize_name, sample_negative,
                            save_embeddings, semantic_classify,
                            synthesize_embeddings)


class TestLoadEmbeddings:
    def test_basic_file_normalized(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("d 3\ncat 1 0 0\ndog 0 2 0\n")
        table = load_embeddings(str(p))
        assert table.names == ["cat", "dog"]
        assert np.allclose(table.get("cat"), [1, 0, 0])
        assert np.allclose(table.get("dog"), [0, 1, 0])

    def test_empty_file(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("")
        with pytest.raises(DataError):
            load_embeddings(str(p))

    def test_header_only(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("d 3\n")
        with pytest.raises(DataError):
            load_embeddings(str(p))

    def test_bad_header(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("dim 3\ncat 1 0 0\n")
        with pytest.raises(DataError):
            load_embeddings(str(p))

    def test_duplicate_name(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("d 2\ncat 1 0\ncat 0 1\n")
        with pytest.raises(DataError):
            load_embeddings(str(p))

    def test_dimension_mismatch(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("d 3\ncat 1 0 0\ndog 0 1\n")
        with pytest.raises(DataError) as e:
            load_embeddings(str(p))
        assert ":3:" in str(e.value)  # error names the offending line

    def test_zero_vector(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("d 2\ncat 0 0\n")
        with pytest.raises(DataError):
            load_embeddings(str(p))

    def test_malformed_float(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("d 2\ncat 1 oops\n")
        with pytest.raises(DataError):
            load_embeddings(str(p))

    def test_roundtrip_50_rows(self, tmp_path):
        rng = np.random.default_rng(0)
        names = [f"class_{i}" for i in range(50)]
        vectors = rng.normal(size=(50, 7))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        table = LabelEmbeddingTable(names=names, vectors=vectors, provenance="test")
        p = tmp_path / "emb.txt"
        save_embeddings(table, str(p))
        loaded = load_embeddings(str(p))
        assert loaded.names == names
        assert np.array_equal(loaded.vectors, vectors)


class TestSynthesize:
    def test_deterministic(self):
        a = synthesize_embeddings(["cat", "dog", "car"], 8, 42)
        b = synthesize_embeddings(["cat", "dog", "car"], 8, 42)
        assert a.names == b.names
        assert np.array_equal(a.vectors, b.vectors)

    def test_different_seeds_differ(self):
        a = synthesize_embeddings(["cat", "dog"], 8, 1)
        b = synthesize_embeddings(["cat", "dog"], 8, 2)
        assert not np.allclose(a.vectors, b.vectors)

    def test_unit_norm(self):
        t = synthesize_embeddings([f"c{i}" for i in range(10)], 16, 3)
        assert np.allclose(np.linalg.norm(t.vectors, axis=1), 1.0)

    def test_group_theta_zero_identical(self):
        t = synthesize_embeddings(
            ["cat", "lion", "car"], 8, 5,
            similarity_groups=[SimilarityGroup(("cat", "lion"), 0.0)])
        assert np.allclose(t.get("cat"), t.get("lion"))

    def test_group_theta_30_cosine_bound(self):
        # two members each within 30 deg of the anchor: pairwise angle <= 60 deg
        for seed in range(20):
            t = synthesize_embeddings(
                ["a", "b", "c"], 12, seed,
                similarity_groups=[SimilarityGroup(("a", "b"), 30.0)])
            cos = float(t.get("a") @ t.get("b"))
            assert cos >= math.cos(math.radians(60)) - 1e-12

    def test_d_too_small(self):
        with pytest.raises(ConfigurationError):
            synthesize_embeddings(["a", "b"], 1, 0)

    def test_name_normalization(self):
        t = synthesize_embeddings(["Big Cat"], 4, 0)
        assert t.names == ["big_cat"]
        assert "Big Cat" in t


class TestSemanticClassify:
    def test_exact_match_score_one(self):
        t = synthesize_embeddings(["a", "b", "c"], 8, 1)
        name, scores = semantic_classify(t.get("b"), t)
        assert name == "b"
        assert scores[t.index_of("b")] == pytest.approx(1.0)

    def test_single_class_vacuous(self):
        t = LabelEmbeddingTable(names=["only"], vectors=np.array([[1.0, 0.0]]))
        name, _ = semantic_classify(np.array([0.0, 1.0]), t)
        assert name == "only"

    def test_brute_force_oracle(self):
        t = synthesize_embeddings([f"c{i}" for i in range(9)], 6, 2)
        rng = np.random.default_rng(4)
        for _ in range(25):
            m = rng.normal(size=6)
            name, scores = semantic_classify(m, t)
            unit = m / np.linalg.norm(m)
            expect = [sum(t.vectors[i][k] * unit[k] for k in range(6))
                      for i in range(9)]
            assert np.allclose(scores, expect, atol=1e-10)
            assert name == t.names[int(np.argmax(expect))]

    def test_positive_rescale_invariance(self):
        t = synthesize_embeddings(["x", "y", "z"], 5, 7)
        m = np.array([0.3, -0.1, 0.8, 0.05, -0.4])
        n1, s1 = semantic_classify(m, t)
        n2, s2 = semantic_classify(m * 123.0, t)
        assert n1 == n2
        assert np.allclose(s1, s2, atol=1e-12)

    def test_zero_vector_rejected(self):
        t = synthesize_embeddings(["a", "b"], 4, 0)
        with pytest.raises(ValueError):
            semantic_classify(np.zeros(4), t)

    def test_cross_table_query(self):
        # same vector classifies against any table of matching dimension
        t1 = synthesize_embeddings(["a", "b"], 6, 1)
        t2 = synthesize_embeddings(["p", "q", "r"], 6, 2)
        m = t1.get("a")
        name, scores = semantic_classify(m, t2)
        assert name in t2.names and scores.shape == (3,)


class TestSampleNegative:
    def test_two_class_always_other(self):
        t = synthesize_embeddings(["a", "b"], 4, 0)
        rng = np.random.default_rng(0)
        assert all(sample_negative("a", t, rng) == "b" for _ in range(20))

    def test_uniformity_multinomial(self):
        names = [f"c{i}" for i in range(10)]
        t = synthesize_embeddings(names, 4, 0)
        rng = np.random.default_rng(1)
        counts = {n: 0 for n in names}
        n_draws = 10000
        for _ in range(n_draws):
            counts[sample_negative("c0", t, rng)] += 1
        assert counts["c0"] == 0
        p = 1 / 9
        sigma = math.sqrt(n_draws * p * (1 - p))
        for n in names[1:]:
            assert abs(counts[n] - n_draws * p) < 5 * sigma

    def test_seeded_reproducible(self):
        t = synthesize_embeddings([f"c{i}" for i in range(5)], 4, 0)
        seq1 = [sample_negative("c0", t, np.random.default_rng(9)) for _ in range(1)]
        a = np.random.default_rng(9)
        b = np.random.default_rng(9)
        s1 = [sample_negative("c2", t, a) for _ in range(10)]
        s2 = [sample_negative("c2", t, b) for _ in range(10)]
        assert s1 == s2

    def test_single_class_rejected(self):
        t = LabelEmbeddingTable(names=["only"], vectors=np.array([[1.0, 0.0]]))
        with pytest.raises(ValueError):
            sample_negative("only", t, np.random.default_rng(0))


class TestTable:
    def test_duplicate_names_rejected(self):
        with pytest.raises(DataError):
            LabelEmbeddingTable(names=["a", "a"], vectors=np.eye(2))

    def test_normalize_name(self):
        assert normalize_name(" Big Cat ") == "big_cat"

    def test_get_missing(self):
        t = synthesize_embeddings(["a"], 4, 0)
        with pytest.raises(KeyError):
            t.get("missing")
