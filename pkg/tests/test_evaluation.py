import math

import numpy as np
import pytest
import torch

from lava.data import CompositeSpec, generate_composite_dataset, make_ssl_split
from lava.evaluation import (Episode, FeatureBank, collapse_fraction,
                             compute_features, confidence_interval,
                             disagreement_rate, episode_class_precision,
                             evaluate, knn_classify,
                             oracle_pseudo_label_accuracy,
                             rank_by_disagreement, run_episodes,
                             sample_episode, write_oracle_csv)
from lava.models import ModelStack, StackConfig
from lava.semantics import synthesize_embeddings

torch.set_num_threads(1)


def random_bank(n=50, d=8, n_classes=4, seed=0, tags=False):
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(n, d))
    labels = rng.integers(0, n_classes, size=n)
    source = rng.random(n) < 0.5 if tags else None
    return FeatureBank(vectors=vectors, labels=labels, source_tags=source)


class TestKnnClassify:
    def test_k1_exact_match(self):
        bank = random_bank()
        q = bank.vectors[17]
        assert knn_classify(q, bank, 1) == int(bank.labels[17])

    def test_two_orthogonal_clusters(self):
        vecs = np.array([[1, 0.01], [1, -0.01], [1, 0.0],
                         [0, 1.0], [0.01, 1.0], [-0.01, 1.0]])
        bank = FeatureBank(vectors=vecs, labels=np.array([0, 0, 0, 1, 1, 1]))
        assert knn_classify(np.array([0.9, 0.1]), bank, 3) == 0
        assert knn_classify(np.array([0.1, 0.9]), bank, 3) == 1

    def test_brute_force_oracle(self):
        # O(N^2) re-derivation: full cosine sort, count votes, nearest-tied tie-break
        for seed in range(10):
            bank = random_bank(n=50, seed=seed)
            rng = np.random.default_rng(seed + 99)
            q = rng.normal(size=8)
            got = knn_classify(q, bank, 5)
            qn = q / np.linalg.norm(q)
            sims = [float(v @ qn / np.linalg.norm(v)) for v in bank.vectors]
            order = sorted(range(50), key=lambda i: (-sims[i], i))[:5]
            votes = {}
            for i in order:
                votes[int(bank.labels[i])] = votes.get(int(bank.labels[i]), 0) + 1
            best = max(votes.values())
            tied = {lab for lab, c in votes.items() if c == best}
            expect = next(int(bank.labels[i]) for i in order if int(bank.labels[i]) in tied)
            assert got == expect

    def test_rescale_invariance(self):
        bank = random_bank(seed=3)
        q = np.random.default_rng(1).normal(size=8)
        scaled = FeatureBank(vectors=bank.vectors * 42.0, labels=bank.labels)
        assert knn_classify(q, bank, 7) == knn_classify(q * 0.001, scaled, 7)

    def test_empty_and_bad_k(self):
        bank = random_bank(n=5)
        with pytest.raises(ValueError):
            knn_classify(np.ones(8), bank, 0)
        with pytest.raises(ValueError):
            knn_classify(np.ones(8), bank, 6)

    def test_nan_bank_rejected(self):
        vecs = np.ones((3, 2))
        vecs[1, 0] = np.nan
        with pytest.raises(ValueError):
            FeatureBank(vectors=vecs, labels=np.zeros(3, dtype=int))


def small_eval_setup(seed=0, n_per_class=4):
    spec = CompositeSpec(class_names=("c0", "c1", "c2"), seed=seed)
    manifest = generate_composite_dataset(spec, n_per_class)
    table = synthesize_embeddings(manifest.classes, 8, seed)
    torch.manual_seed(seed)
    stack = ModelStack(StackConfig(n_classes=3, feature_dim=8, projection_dim=6,
                                   semantic_dim=8, ssl_dim=4, hidden_dim=8))
    return manifest, table, stack


class TestEvaluate:
    def test_perfect_knn_on_self_bank(self):
        # bank built from the very items being evaluated: KNN@1 is perfect
        manifest, table, stack = small_eval_setup()
        items = manifest.items
        z, m, _ = compute_features(stack, items)
        labels = np.array([manifest.class_index(it.label) for it in items])
        bank = FeatureBank(vectors=z, labels=labels)
        res = evaluate(stack, items, manifest.classes, table, bank, k=1)
        assert res["knn_acc"] == 1.0
        assert 0.0 <= res["softmax_acc"] <= 1.0
        assert 0.0 <= res["semantic_acc"] <= 1.0

    def test_untrained_accuracies_near_chance(self):
        # an untrained model is a (nearly) arbitrary fixed predictor; accuracy
        # over C balanced classes stays within a generous binomial bound of 1/C
        spec = CompositeSpec(class_names=tuple(f"c{i}" for i in range(4)), seed=3)
        manifest = generate_composite_dataset(spec, 50)
        table = synthesize_embeddings(manifest.classes, 8, 3)
        torch.manual_seed(11)
        stack = ModelStack(StackConfig(n_classes=4, feature_dim=8, projection_dim=6,
                                       semantic_dim=8, ssl_dim=4, hidden_dim=8))
        items = manifest.items
        z, _, _ = compute_features(stack, items)
        labels = np.array([manifest.class_index(it.label) for it in items])
        bank = FeatureBank(vectors=z, labels=labels)
        res = evaluate(stack, items, manifest.classes, table, bank, k=20)
        # softmax/semantic predictions ignore labels entirely, so they cannot
        # systematically beat a label-independent predictor by a huge margin
        assert res["softmax_acc"] <= 0.75
        assert res["semantic_acc"] <= 0.75

    def test_empty_dataset_rejected(self):
        manifest, table, stack = small_eval_setup()
        bank = random_bank()
        with pytest.raises(ValueError):
            evaluate(stack, [], manifest.classes, table, bank)

    def test_unlabelled_item_rejected(self):
        manifest, table, stack = small_eval_setup()
        split = make_ssl_split(manifest, 1, seed=0)
        unl = split.by_split("unlabelled")
        bank = random_bank(d=8)
        with pytest.raises(ValueError):
            evaluate(stack, unl, split.classes, table, bank)

    def test_label_missing_from_table(self):
        manifest, _, stack = small_eval_setup()
        other_table = synthesize_embeddings(["x", "y"], 8, 0)
        bank = random_bank(d=8)
        with pytest.raises(ValueError):
            evaluate(stack, manifest.items, manifest.classes, other_table, bank)


class TestConfidenceInterval:
    def test_equal_accuracies_zero(self):
        assert confidence_interval(np.full(10, 0.73)) == pytest.approx(0.0, abs=1e-15)
        assert confidence_interval(np.full(10, 0.5)) == 0.0

    def test_formula_oracle(self):
        acc = np.array([0.0, 1.0])
        # std(ddof=1) = 0.7071...; CI = 1.96 * 0.7071 / sqrt(2)
        expect = 1.96 * math.sqrt(0.5) / math.sqrt(2)
        assert confidence_interval(acc) == pytest.approx(expect, abs=1e-12)
        assert confidence_interval(acc) == pytest.approx(0.98, abs=1e-9)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            confidence_interval(np.array([0.5]))

    def test_random_against_direct_formula(self):
        rng = np.random.default_rng(0)
        acc = rng.random(17)
        n = 17
        mean = sum(acc) / n
        var = sum((a - mean) ** 2 for a in acc) / (n - 1)
        expect = 1.96 * math.sqrt(var) / math.sqrt(n)
        assert confidence_interval(acc) == pytest.approx(expect, abs=1e-12)


class TestRunEpisodes:
    def _sampler(self, manifest):
        def sampler(i):
            rng = np.random.default_rng(1000 + i)
            return sample_episode(manifest, rng, ways_range=(2, 3),
                                  shots_range=(1, 2), n_query=2, seed=i)
        return sampler

    def test_constant_builder(self):
        manifest = generate_composite_dataset(
            CompositeSpec(class_names=("a", "b", "c"), seed=0), 6)
        for it in manifest.items:
            it.split = "test"
        report = run_episodes(lambda ep, seed: 0.5, self._sampler(manifest), 5)
        assert report.mean == 0.5
        assert report.ci95 == 0.0
        assert len(report.accuracies) == 5

    def test_reproducible_per_seed(self):
        manifest = generate_composite_dataset(
            CompositeSpec(class_names=("a", "b", "c"), seed=0), 6)
        for it in manifest.items:
            it.split = "test"

        def builder(episode, seed):
            return (seed % 97) / 97

        r1 = run_episodes(builder, self._sampler(manifest), 6, base_seed=3)
        r2 = run_episodes(builder, self._sampler(manifest), 6, base_seed=3)
        assert np.array_equal(r1.accuracies, r2.accuracies)

    def test_dict_results_recorded(self):
        manifest = generate_composite_dataset(
            CompositeSpec(class_names=("a", "b", "c"), seed=0), 6)
        for it in manifest.items:
            it.split = "test"
        report = run_episodes(lambda ep, s: {"accuracy": 1.0, "ways": len(ep.classes)},
                              self._sampler(manifest), 3)
        assert report.mean == 1.0
        assert all("ways" in d for d in report.details)

    def test_sampler_exhaustion(self):
        def sampler(i):
            raise IndexError
        with pytest.raises(ValueError):
            run_episodes(lambda ep, s: 1.0, sampler, 2)

    def test_needs_two_episodes(self):
        with pytest.raises(ValueError):
            run_episodes(lambda ep, s: 1.0, lambda i: None, 1)


class TestSampleEpisode:
    def test_structure(self):
        manifest = generate_composite_dataset(
            CompositeSpec(class_names=tuple(f"c{i}" for i in range(6)), seed=2), 15)
        for it in manifest.items:
            it.split = "test"
        rng = np.random.default_rng(4)
        ep = sample_episode(manifest, rng, ways_range=(2, 5), shots_range=(1, 10),
                            n_query=5)
        assert 2 <= len(ep.classes) <= 5
        support_classes = {it.label for it in ep.support}
        assert support_classes == set(ep.classes)
        for it in ep.query:
            assert it.label in support_classes
        assert not (set(id(x) for x in ep.support) & set(id(x) for x in ep.query))

    def test_query_class_outside_support_rejected(self):
        manifest = generate_composite_dataset(
            CompositeSpec(class_names=("a", "b", "c"), seed=0), 4)
        items = manifest.items
        with pytest.raises(ValueError):
            Episode(support=[items[0]], query=[items[-1]], classes=["a", "b"], seed=0)

    def test_too_few_classes(self):
        manifest = generate_composite_dataset(
            CompositeSpec(class_names=("a",), seed=0), 4)
        for it in manifest.items:
            it.split = "test"
        with pytest.raises(ValueError):
            sample_episode(manifest, np.random.default_rng(0))


class TestDisagreement:
    def test_mixed_labels_worked_example(self):
        labels = ["dog", "dog", "dog", "cat", "squirrel", "mouse"]
        assert disagreement_rate(labels) == pytest.approx(4 / 6, abs=1e-12)

    def test_all_identical(self):
        assert disagreement_rate([3] * 8) == pytest.approx(1 / 8)

    def test_all_distinct(self):
        assert disagreement_rate(list(range(9))) == 1.0

    def test_permutation_invariant(self):
        base = [0, 1, 1, 2, 0, 3]
        rng = np.random.default_rng(0)
        for _ in range(5):
            perm = list(rng.permutation(base))
            assert disagreement_rate(perm) == disagreement_rate(base)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            disagreement_rate([])


class TestRankByDisagreement:
    def test_split_image_ranked_first(self):
        records = {"A": [[0, 0, 0], [1, 1, 1]], "B": [[0, 1, 2], [0, 1, 2]]}
        ranked = rank_by_disagreement(records)
        assert ranked[0][0] == "B"
        assert ranked[0][1] == 1.0
        assert ranked[1][1] == pytest.approx(1 / 3)

    def test_singleton(self):
        ranked = rank_by_disagreement({"only": [[0, 1]]})
        assert ranked == [("only", 1.0)]

    def test_hand_computed_means(self):
        records = {
            "x": [[0, 0], [0, 1]],           # rates 0.5, 1.0 -> 0.75
            "y": [[0, 1, 2], [0, 0, 0]],     # rates 1.0, 1/3 -> 2/3
            "z": [[5, 5, 5, 5]],             # 0.25
        }
        ranked = rank_by_disagreement(records)
        assert [r[0] for r in ranked] == ["x", "y", "z"]
        assert ranked[0][1] == pytest.approx(0.75)
        assert ranked[1][1] == pytest.approx(2 / 3)
        assert ranked[2][1] == pytest.approx(0.25)

    def test_tie_stable_by_id(self):
        records = {"b": [[0, 1]], "a": [[2, 3]]}
        ranked = rank_by_disagreement(records)
        assert [r[0] for r in ranked] == ["a", "b"]


class TestCollapseFraction:
    def test_all_source(self):
        bank = random_bank(n=20, tags=True)
        bank.source_tags[:] = True
        bank.source_tags[0] = False  # keep the mixed-bank precondition checkable
        bank = FeatureBank(vectors=bank.vectors, labels=bank.labels,
                           source_tags=np.ones(20, dtype=bool))
        with pytest.raises(ValueError):
            collapse_fraction(np.ones((2, 8)), bank, k=10)

    def test_extremes_via_construction(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(30, 6))
        labels = np.zeros(30, dtype=int)
        tags = np.zeros(30, dtype=bool)
        tags[:15] = True
        bank = FeatureBank(vectors=vectors, labels=labels, source_tags=tags)
        # query identical to source vectors: nearest k=1 is source
        assert collapse_fraction(vectors[0], bank, k=1) == 1.0
        assert collapse_fraction(vectors[20], bank, k=1) == 0.0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        vectors = rng.normal(size=(30, 5))
        tags = rng.random(30) < 0.4
        tags[0] = True
        tags[1] = False
        bank = FeatureBank(vectors=vectors, labels=np.zeros(30, dtype=int),
                           source_tags=tags)
        queries = rng.normal(size=(8, 5))
        got = collapse_fraction(queries, bank, k=10, per_query=True)
        for qi, q in enumerate(queries):
            qn = q / np.linalg.norm(q)
            sims = [float(v @ qn / np.linalg.norm(v)) for v in vectors]
            order = sorted(range(30), key=lambda i: (-sims[i], i))[:10]
            expect = sum(bool(tags[i]) for i in order) / 10
            assert got[qi] == pytest.approx(expect, abs=1e-12)
        # complement property: source fraction + target fraction == 1
        assert np.allclose(got + (1 - got), 1.0)

    def test_bank_smaller_than_k(self):
        bank = random_bank(n=5, tags=True)
        bank.source_tags[0] = True
        bank.source_tags[1] = False
        with pytest.raises(ValueError):
            collapse_fraction(np.ones(8), bank, k=10)


class TestOraclePseudoLabels:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 1])
        preds = np.broadcast_to(labels[None, :, None], (3, 4, 5)).copy()
        acc, _ = oracle_pseudo_label_accuracy(labels, preds)
        assert np.array_equal(acc, np.ones((3, 5)))

    def test_constant_wrong_class(self):
        labels = np.zeros(6, dtype=int)
        preds = np.full((2, 6, 3), 1)
        acc, _ = oracle_pseudo_label_accuracy(labels, preds)
        assert np.array_equal(acc, np.zeros((2, 3)))

    def test_replay_matches_recomputation(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 4, size=10)
        preds = rng.integers(0, 4, size=(5, 10, 4))
        acc, dis = oracle_pseudo_label_accuracy(labels, preds,
                                                slot_groups={"large": [0, 1]})
        for e in range(5):
            for s in range(4):
                expect = sum(int(preds[e, i, s] == labels[i]) for i in range(10)) / 10
                assert acc[e, s] == pytest.approx(expect, abs=1e-12)
            expect_dis = sum(len(set(preds[e, i, [0, 1]].tolist())) / 2
                             for i in range(10)) / 10
            assert dis["large"][e] == pytest.approx(expect_dis, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            oracle_pseudo_label_accuracy(np.zeros(3), np.zeros((2, 4, 2)))

    def test_csv_output(self, tmp_path):
        acc = np.array([[1.0, 0.5], [0.75, 0.25]])
        path = tmp_path / "oracle.csv"
        write_oracle_csv(str(path), acc, ["teacher_large", "student_small"],
                         {"large": np.array([0.5, 0.6])})
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,crop_slot,accuracy"
        assert len(lines) == 1 + 4 + 2


class TestEpisodePrecision:
    def test_perfect(self):
        y = np.array([0, 1, 1, 2])
        assert episode_class_precision(y, y) == 1.0

    def test_macro_average_oracle(self):
        y_true = np.array([0, 0, 1, 1])
        y_pred = np.array([0, 1, 1, 1])
        # class 0: predicted once, correct once -> 1.0
        # class 1: predicted 3x, correct 2x -> 2/3
        assert episode_class_precision(y_true, y_pred) == pytest.approx((1 + 2 / 3) / 2)
