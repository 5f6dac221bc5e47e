"""Ranking, metrics, two-stage re-ranking, and dual-softmax rescoring."""

import numpy as np
import pytest

from tefal.corpus import synth_corpus
from tefal.model import create_model, similarity_matrix
from tefal.ranking import (
    _stage1_similarity,
    compute_metrics,
    dual_softmax_postprocess,
    mean_pool,
    rank_exhaustive,
    ranks_from_similarity,
    rerank_two_stage,
    resolve_workers,
)


def brute_force_rank(scores, truth, ids):
    """Sort-and-count oracle: descending score, ties by ascending id."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], ids[j]))
    return order.index(truth) + 1


class TestMeanPool:
    def test_single_frame(self):
        row = np.random.default_rng(0).standard_normal((1, 5))
        np.testing.assert_array_equal(mean_pool(row), row)

    def test_opposite_rows_cancel_exactly(self):
        r = np.random.default_rng(1).standard_normal((1, 4))
        out = mean_pool(np.vstack([r, -r]))
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_random_mean(self):
        m = np.random.default_rng(2).standard_normal((3, 4))
        expected = np.array([[sum(m[:, d]) / 3.0 for d in range(4)]])
        np.testing.assert_allclose(mean_pool(m), expected, atol=1e-15)


class TestComputeMetrics:
    def test_perfect_ranks(self):
        m = compute_metrics([1, 1, 1, 1], candidate_count=50)
        assert (m.r1, m.r5, m.r10, m.mdr, m.mnr) == (100.0, 100.0, 100.0, 1.0, 1.0)

    def test_hand_example(self):
        m = compute_metrics([1, 6, 11], candidate_count=20)
        assert m.r1 == pytest.approx(100 / 3)
        assert m.r5 == pytest.approx(100 / 3)
        assert m.r10 == pytest.approx(200 / 3)
        assert m.mdr == 6.0
        assert m.mnr == 6.0

    def test_even_count_median_takes_lower_middle(self):
        assert compute_metrics([1, 2, 9, 10], 10).mdr == 2.0

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        ranks = rng.integers(1, 51, size=30)
        base = compute_metrics(ranks, 50)
        shuffled = compute_metrics(rng.permutation(ranks), 50)
        assert base == shuffled

    def test_recall_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = compute_metrics(rng.integers(1, 101, size=25), 100)
            assert m.r1 <= m.r5 <= m.r10 <= 100.0
            assert 1.0 <= m.mdr <= 100.0

    def test_rank_out_of_range(self):
        with pytest.raises(ValueError):
            compute_metrics([0, 3], 10)
        with pytest.raises(ValueError):
            compute_metrics([3, 11], 10)


class TestRanksFromSimilarity:
    def test_identity_matrix_all_rank_one(self):
        ids = [f"i{j}" for j in range(5)]
        np.testing.assert_array_equal(ranks_from_similarity(np.eye(5), ids),
                                      np.ones(5, dtype=int))

    def test_single_item(self):
        assert ranks_from_similarity(np.array([[0.2]]), ["a"])[0] == 1

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(5)
        ids = [f"item{j:03d}" for j in range(10)]
        for _ in range(50):
            sim = rng.standard_normal((10, 10))
            ranks = ranks_from_similarity(sim, ids)
            for i in range(10):
                assert ranks[i] == brute_force_rank(sim[i], i, ids)

    def test_tie_break_by_ascending_id(self):
        sim = np.array([[0.5, 0.5], [0.5, 0.5]])
        ranks = ranks_from_similarity(sim, ["a", "b"])
        # query 0's truth "a" wins its tie; query 1's truth "b" loses to "a"
        np.testing.assert_array_equal(ranks, [1, 2])

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        sim = rng.uniform(-1, 1, (8, 8))
        ids = [f"v{j}" for j in range(8)]
        base = ranks_from_similarity(sim, ids)
        np.testing.assert_array_equal(
            ranks_from_similarity(np.tanh(3.0 * sim), ids), base)

    def test_consistent_relabeling_permutes_ranks(self):
        # renumbering the aligned items (rows, columns, and ids together)
        # carries each query's rank along with it
        rng = np.random.default_rng(7)
        sim = rng.standard_normal((9, 9))
        ids = np.array([f"v{j}" for j in range(9)])
        base = ranks_from_similarity(sim, ids)
        perm = rng.permutation(9)
        relabeled = ranks_from_similarity(sim[np.ix_(perm, perm)], ids[perm])
        np.testing.assert_array_equal(relabeled, base[perm])


@pytest.fixture(scope="module")
def small_setup():
    corpus = synth_corpus(seed=11, n_items=30, dim=12, frames=3, audio_tokens=4)
    model = create_model(seed=3, dim=12)
    return model, corpus


class TestRankExhaustive:
    def test_single_item_corpus(self):
        corpus = synth_corpus(seed=12, n_items=1, dim=8, frames=2, audio_tokens=2)
        model = create_model(seed=4, dim=8)
        result = rank_exhaustive(model, corpus)
        assert result.ranks.tolist() == [1]

    def test_counts_one_eval_per_pair(self, small_setup):
        model, corpus = small_setup
        result = rank_exhaustive(model, corpus)
        assert result.stats.stage2_model_evals == len(corpus) ** 2
        assert result.sim.shape == (30, 30)

    def test_v2t_is_the_transposed_problem(self, small_setup):
        model, corpus = small_setup
        sim = rank_exhaustive(model, corpus).sim
        ranks_v2t = ranks_from_similarity(sim.T, corpus.ids)
        m = compute_metrics(ranks_v2t, len(corpus), "v2t")
        assert m.direction == "v2t"
        # transposing twice returns the original ranks
        np.testing.assert_array_equal(
            ranks_from_similarity(sim.T.T, corpus.ids),
            ranks_from_similarity(sim, corpus.ids))

    def test_worker_count_does_not_change_results(self, small_setup):
        model, corpus = small_setup
        base = similarity_matrix(model, corpus, workers=1)
        threaded = similarity_matrix(model, corpus, workers=4)
        np.testing.assert_array_equal(base, threaded)


class TestRerankTwoStage:
    def test_full_shortlist_equals_exhaustive(self, small_setup):
        model, corpus = small_setup
        exhaustive = rank_exhaustive(model, corpus)
        rerank = rerank_two_stage(model, corpus, k=len(corpus))
        np.testing.assert_array_equal(rerank.ranks, exhaustive.ranks)

    def test_full_shortlist_equals_exhaustive_v2t(self, small_setup):
        model, corpus = small_setup
        sim = rank_exhaustive(model, corpus).sim
        rerank = rerank_two_stage(model, corpus, k=len(corpus), direction="v2t")
        np.testing.assert_array_equal(rerank.ranks,
                                      ranks_from_similarity(sim.T, corpus.ids))

    def test_k_one_ranks_truth_first_iff_stage1_top1_correct(self, small_setup):
        model, corpus = small_setup
        stage1 = _stage1_similarity(corpus, corpus.texts)
        ids = np.asarray(corpus.ids)
        result = rerank_two_stage(model, corpus, k=1)
        for i in range(len(corpus)):
            top1 = int(np.lexsort((ids, -stage1[i]))[0])
            assert (result.ranks[i] == 1) == (top1 == i)

    def test_stage2_work_bounded_by_shortlist(self, small_setup):
        model, corpus = small_setup
        k = 7
        result = rerank_two_stage(model, corpus, k=k)
        assert result.stats.stage2_model_evals == k * len(corpus)
        assert result.stats.stage1_comparisons == len(corpus) ** 2

    def test_below_shortlist_items_keep_stage1_order(self, small_setup):
        model, corpus = small_setup
        k = 5
        stage1 = _stage1_similarity(corpus, corpus.texts)
        ids = np.asarray(corpus.ids)
        result = rerank_two_stage(model, corpus, k=k)
        for i in range(len(corpus)):
            order1 = np.lexsort((ids, -stage1[i]))
            if i not in order1[:k]:
                tail_pos = int(np.nonzero(order1[k:] == i)[0][0])
                assert result.ranks[i] == k + 1 + tail_pos

    def test_k_out_of_range(self, small_setup):
        model, corpus = small_setup
        for k in (0, -2, len(corpus) + 1):
            with pytest.raises(ValueError):
                rerank_two_stage(model, corpus, k=k)

    def test_custom_shortlist_provider_replaces_stage_one(self, small_setup):
        model, corpus = small_setup
        n = len(corpus)
        # an oracle provider always shortlists the ground truth first
        result = rerank_two_stage(model, corpus, k=1,
                                  shortlist_provider=lambda c, t: np.eye(n))
        np.testing.assert_array_equal(result.ranks, np.ones(n, dtype=int))
        # stage 2 is unchanged: a full shortlist still matches exhaustive
        shuffled = rerank_two_stage(
            model, corpus, k=n,
            shortlist_provider=lambda c, t: -_stage1_similarity(c, t))
        exhaustive = rank_exhaustive(model, corpus)
        np.testing.assert_array_equal(shuffled.ranks, exhaustive.ranks)


class TestDualSoftmax:
    def test_one_by_one_is_identity(self):
        sim = np.array([[0.42]])
        np.testing.assert_allclose(dual_softmax_postprocess(sim, 2.0), sim)

    def test_identical_rows_scale_uniformly(self):
        row = np.array([0.3, -0.1, 0.8])
        sim = np.tile(row, (4, 1))
        out = dual_softmax_postprocess(sim, 3.0)
        np.testing.assert_allclose(out, sim * 0.25, atol=1e-15)
        # per-row ranking is untouched
        np.testing.assert_array_equal(np.argsort(-out[0]), np.argsort(-row))

    def test_direct_formula(self):
        rng = np.random.default_rng(7)
        sim = rng.uniform(-1, 1, (4, 4))
        temp = 5.0
        out = dual_softmax_postprocess(sim, temp)
        expected = np.empty_like(sim)
        for j in range(4):
            col = np.exp(sim[:, j] * temp)
            expected[:, j] = sim[:, j] * col / col.sum()
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_requires_positive_temperature(self):
        with pytest.raises(ValueError):
            dual_softmax_postprocess(np.zeros((2, 2)), 0.0)


class TestWorkers:
    def test_env_cap(self, monkeypatch):
        monkeypatch.setenv("TEFAL_THREADS", "2")
        assert resolve_workers(8) == 2
        assert resolve_workers(1) == 1
        monkeypatch.delenv("TEFAL_THREADS")
        assert resolve_workers(8) == 8
